#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "dnd/defense.hpp"
#include "dnd/sentinel.hpp"

namespace dnd {

inline constexpr int kWireVersion = 1;

struct GatewayConfig {
  std::string host = "127.0.0.1";
  /// 0 binds an ephemeral port.
  int port = 7878;
  std::uint64_t root_seed = 0;
  DefenseConfig defense;
  EscalationPolicy policy;
  std::size_t window = 16;
  std::size_t capacity = 64;
  double idle_timeout_s = 3600.0;
  bool reject_on_suspect = false;
  std::vector<std::filesystem::path> registry_paths;
  std::filesystem::path ae_path;
  std::filesystem::path vae_path;
  std::filesystem::path detector_path;
  std::filesystem::path decoy_path;
  std::filesystem::path sentinel_path;
  std::filesystem::path audit_path = "audit.jsonl";

  /// Checks values only; checkpoint paths are checked when loading.
  void validate() const;
  Json to_json() const;
  /// Relative paths resolve against `base`.
  static GatewayConfig from_json(const Json& j, const std::filesystem::path& base = {});
};

struct WireRequest {
  std::string client_id;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> pixels;
};

struct WireResponse {
  std::string request_id;
  int label = 0;
  double confidence = 0.0;

  /// {"confidence", "label", "request_id", "v"}; nothing else.
  Json to_json() const;
};

/// A request line that cannot be served; `code` is "parse" or "invalid_input".
class WireError : public std::runtime_error {
 public:
  WireError(std::string code, const std::string& detail) : std::runtime_error(detail), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

/// Throws WireError("parse") on malformed JSON, WireError("invalid_input") on
/// a missing field, wrong version, pixel count or range.
WireRequest parse_request(const std::string& line);
std::string error_line(const std::string& code);

/// Session stream seed: SplitMix64 of the root seed mixed with FNV-1a(client_id).
std::uint64_t client_seed(std::uint64_t root_seed, const std::string& client_id);

/// Everything the gateway serves with, loaded from checkpoints or built in process.
struct GatewayModels {
  DefensePipeline pipeline;
  SequenceDetector sentinel;
};

/// Throws IoError naming the first checkpoint that fails to load.
GatewayModels load_gateway_models(const GatewayConfig& cfg);

/// Shared gateway state. Requests for one client are serialized through that
/// client's mutex; different clients proceed in parallel.
class GatewayState {
 public:
  using Clock = std::function<double()>;

  GatewayState(GatewayModels models, GatewayConfig cfg, Clock clock = {});

  /// Serves one validated request.
  WireResponse handle_request(const WireRequest& req);
  /// Parses, serves and renders one line; never throws for bad input.
  std::string handle_line(const std::string& line);

  std::vector<Json> audit_entries() const;
  std::size_t handled_count() const;
  const GatewayConfig& config() const noexcept { return cfg_; }
  const GatewayModels& models() const noexcept { return models_; }
  /// Current state of a client's session, if it exists.
  std::optional<SessionState> session_state(const std::string& client_id) const;

 private:
  struct Client {
    std::mutex mu;
    ClientSession session;
    Rng rng;
    std::uint64_t next_seq = 0;
    Client(const std::string& id, std::size_t capacity, std::uint64_t seed) : session(id, capacity), rng(seed) {}
  };

  Client& client(const std::string& id);
  void append_audit(Json entry);

  GatewayModels models_;
  GatewayConfig cfg_;
  Clock clock_;
  mutable std::mutex clients_mu_;
  std::unordered_map<std::string, std::unique_ptr<Client>> clients_;
  mutable std::mutex audit_mu_;
  std::vector<Json> audit_;
};

/// JSON-lines of the audit entries in arrival order, written atomically.
void export_audit(const GatewayState& state, const std::filesystem::path& path);

/// Newline-delimited JSON over TCP, one thread per connection.
class GatewayServer {
 public:
  explicit GatewayServer(GatewayState& state);
  ~GatewayServer();
  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;

  /// Binds and listens; throws IoError if the address is unavailable.
  void start(const std::string& host, int port);
  /// The bound port (useful after binding port 0).
  int port() const noexcept { return port_; }
  /// Accepts until stop() is called or `external_stop` becomes true.
  void run(const std::atomic<bool>* external_stop = nullptr);
  void stop() noexcept { stopping_ = true; }

 private:
  void serve_connection(int fd);

  GatewayState& state_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex conn_mu_;
  std::vector<std::jthread> connections_;
};

/// Loads the checkpoints, serves until `stop` is set, then exports the audit
/// log. `on_ready` receives the bound port once listening.
void serve(const GatewayConfig& cfg, const std::atomic<bool>& stop, const std::function<void(int)>& on_ready = {});

/// Blocking line client for tests and the red-team driver.
class GatewayClient {
 public:
  GatewayClient(const std::string& host, int port);
  ~GatewayClient();
  GatewayClient(const GatewayClient&) = delete;
  GatewayClient& operator=(const GatewayClient&) = delete;

  /// Sends one line (a newline is appended) and returns the response line.
  std::string round_trip(const std::string& line);

 private:
  int fd_ = -1;
  std::string buffer_;
};

/// Request line for a single-channel image.
std::string request_line(const std::string& client_id, const Tensor& image);

}  // namespace dnd
