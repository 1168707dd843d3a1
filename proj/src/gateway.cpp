#include "dnd/gateway.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>

#include "dnd/checkpoint.hpp"
#include "dnd/errors.hpp"

namespace dnd {

namespace {

constexpr std::size_t kMaxLineBytes = 1 << 22;
constexpr std::size_t kMaxSide = 4096;
constexpr std::size_t kMaxClientIdBytes = 256;
constexpr int kPollMillis = 100;

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

double wall_clock() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

bool send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

addrinfo* lookup(const std::string& host, int port, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0) throw IoError("cannot resolve '" + host + "': " + ::gai_strerror(rc));
  return res;
}

}  // namespace

// --- config ------------------------------------------------------------------

void GatewayConfig::validate() const {
  if (port < 0 || port > 65535) throw ValidationError("gateway port must be in [0, 65535]");
  if (host.empty()) throw ValidationError("gateway host must not be empty");
  if (window < 1) throw ValidationError("gateway window must be >= 1");
  if (capacity < window + 1) throw ValidationError("gateway capacity must exceed the window");
  if (!(idle_timeout_s > 0.0)) throw ValidationError("gateway idle_timeout_s must be positive");
  defense.validate();
  policy.validate();
}

Json GatewayConfig::to_json() const {
  Json reg = Json::array();
  for (const auto& p : registry_paths) reg.push_back(p.string());
  return {{"host", host},
          {"port", port},
          {"root_seed", root_seed},
          {"defense", defense.to_json()},
          {"policy", {{"theta", policy.theta}, {"lam", policy.lam}}},
          {"window", window},
          {"capacity", capacity},
          {"idle_timeout_s", idle_timeout_s},
          {"reject_on_suspect", reject_on_suspect},
          {"checkpoints",
           {{"registry", reg},
            {"ae", ae_path.string()},
            {"vae", vae_path.string()},
            {"detector", detector_path.string()},
            {"decoy", decoy_path.string()},
            {"sentinel", sentinel_path.string()}}},
          {"audit_path", audit_path.string()}};
}

GatewayConfig GatewayConfig::from_json(const Json& j, const std::filesystem::path& base) {
  GatewayConfig c;
  try {
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.root_seed = j.value("root_seed", c.root_seed);
    if (j.contains("defense")) c.defense = DefenseConfig::from_json(j.at("defense"));
    const Json pol = j.value("policy", Json::object());
    c.policy.theta = pol.value("theta", c.policy.theta);
    c.policy.lam = pol.value("lam", c.policy.lam);
    c.window = j.value("window", c.window);
    c.capacity = j.value("capacity", c.capacity);
    c.idle_timeout_s = j.value("idle_timeout_s", c.idle_timeout_s);
    c.reject_on_suspect = j.value("reject_on_suspect", c.reject_on_suspect);
    const Json ck = j.value("checkpoints", Json::object());
    for (const Json& p : ck.value("registry", Json::array())) c.registry_paths.push_back(resolve(base, p.get<std::string>()));
    c.ae_path = resolve(base, ck.value("ae", std::string()));
    c.vae_path = resolve(base, ck.value("vae", std::string()));
    c.detector_path = resolve(base, ck.value("detector", std::string()));
    c.decoy_path = resolve(base, ck.value("decoy", std::string()));
    c.sentinel_path = resolve(base, ck.value("sentinel", std::string()));
    c.audit_path = resolve(base, j.value("audit_path", c.audit_path.string()));
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed gateway config: ") + e.what());
  }
  c.validate();
  return c;
}

GatewayModels load_gateway_models(const GatewayConfig& cfg) {
  if (cfg.registry_paths.empty()) throw IoError("gateway config lists no registry checkpoints");
  const auto guarded = [](const std::filesystem::path& p, auto load) {
    try {
      return load(p);
    } catch (const std::exception& e) {
      throw IoError("cannot load checkpoint '" + p.string() + "': " + e.what());
    }
  };
  std::vector<Classifier> models;
  for (const auto& p : cfg.registry_paths) models.push_back(guarded(p, [](const auto& q) { return load_classifier(q); }));
  DenoisingAutoencoder ae = guarded(cfg.ae_path, [](const auto& q) { return load_autoencoder(q); });
  VariationalAutoencoder vae = guarded(cfg.vae_path, [](const auto& q) { return load_vae(q); });
  AdvDetector det = guarded(cfg.detector_path, [](const auto& q) { return AdvDetector(load_classifier(q)); });
  Classifier decoy = guarded(cfg.decoy_path, [](const auto& q) { return load_classifier(q); });
  SequenceDetector sentinel = guarded(cfg.sentinel_path, [](const auto& q) { return load_sequence_detector(q); });
  EnsembleRegistry reg(std::move(models), derive_seed(cfg.root_seed, "gateway/registry"));
  return {DefensePipeline{std::move(reg), std::move(ae), std::move(vae), std::move(det), std::move(decoy), cfg.defense},
          std::move(sentinel)};
}

// --- wire --------------------------------------------------------------------

Json WireResponse::to_json() const {
  return {{"v", kWireVersion}, {"request_id", request_id}, {"label", label}, {"confidence", confidence}};
}

std::string error_line(const std::string& code) { return Json{{"v", kWireVersion}, {"error", code}}.dump(); }

WireRequest parse_request(const std::string& line) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw WireError("parse", e.what());
  }
  const auto invalid = [](const std::string& why) { return WireError("invalid_input", why); };
  if (!j.is_object()) throw invalid("request is not an object");
  const auto field = [&](const char* name) -> const Json& {
    const auto it = j.find(name);
    if (it == j.end()) throw invalid(std::string("missing field '") + name + "'");
    return *it;
  };
  const Json& v = field("v");
  if (!v.is_number_integer() || v.get<long long>() != kWireVersion) throw invalid("unsupported version");
  const Json& id = field("client_id");
  if (!id.is_string() || id.get_ref<const std::string&>().empty() ||
      id.get_ref<const std::string&>().size() > kMaxClientIdBytes) {
    throw invalid("client_id must be a non-empty string");
  }
  WireRequest req;
  req.client_id = id.get<std::string>();
  const auto side = [&](const char* name) {
    const Json& s = field(name);
    if (!s.is_number_integer() || s.get<long long>() < 1 || s.get<long long>() > static_cast<long long>(kMaxSide)) {
      throw invalid(std::string("field '") + name + "' must be a positive integer");
    }
    return static_cast<std::size_t>(s.get<long long>());
  };
  req.h = side("h");
  req.w = side("w");
  const Json& px = field("pixels");
  if (!px.is_array()) throw invalid("pixels must be an array");
  if (px.size() != req.h * req.w) throw invalid("pixel count does not equal h*w");
  req.pixels.reserve(px.size());
  for (const Json& p : px) {
    if (!p.is_number()) throw invalid("pixels must be numbers");
    const double d = p.get<double>();
    if (!std::isfinite(d) || d < 0.0 || d > 1.0) throw invalid("pixel outside [0, 1]");
    req.pixels.push_back(d);
  }
  return req;
}

std::string request_line(const std::string& client_id, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw DimensionError("request_line: expected a [1, h, w] image");
  return Json{{"v", kWireVersion},
              {"client_id", client_id},
              {"h", image.dim(1)},
              {"w", image.dim(2)},
              {"pixels", image.data}}
      .dump();
}

std::uint64_t client_seed(std::uint64_t root_seed, const std::string& client_id) {
  return derive_seed(root_seed, fnv1a64(client_id));
}

// --- state -------------------------------------------------------------------

GatewayState::GatewayState(GatewayModels models, GatewayConfig cfg, Clock clock)
    : models_(std::move(models)), cfg_(std::move(cfg)), clock_(clock ? std::move(clock) : Clock(wall_clock)) {
  cfg_.validate();
  models_.pipeline.cfg = cfg_.defense;
  if (models_.pipeline.registry.empty()) throw ValidationError("gateway registry is empty");
}

GatewayState::Client& GatewayState::client(const std::string& id) {
  std::lock_guard lk(clients_mu_);
  auto it = clients_.find(id);
  if (it == clients_.end()) {
    it = clients_.emplace(id, std::make_unique<Client>(id, cfg_.capacity, client_seed(cfg_.root_seed, id))).first;
  }
  return *it->second;
}

void GatewayState::append_audit(Json entry) {
  std::lock_guard lk(audit_mu_);
  audit_.push_back(std::move(entry));
}

WireResponse GatewayState::handle_request(const WireRequest& req) {
  const Shape& shape = models_.pipeline.registry.model(0).spec().input_shape;
  if (shape[0] != 1 || req.h != shape[1] || req.w != shape[2]) {
    throw WireError("invalid_input", "image must be " + std::to_string(shape[1]) + "x" + std::to_string(shape[2]));
  }
  Tensor x(shape, req.pixels);

  Client& c = client(req.client_id);
  std::lock_guard lk(c.mu);
  const double now = clock_();
  if (c.session.query_count() > 0 && session_expired(c.session, now, cfg_.idle_timeout_s)) {
    c.session = ClientSession(req.client_id, cfg_.capacity);
  }
  c.session.last_seen = now;

  // The answer is part of the query record, so the current request is served
  // under the state reached after the previous one.
  const InferenceOutcome out = defend_infer(models_.pipeline, x, c.session.state(), c.rng);
  record_query(c.session, x, out.label, out.confidence);
  if (cfg_.defense.sentinel) {
    escalate(c.session, detect_sequence(models_.sentinel, c.session, cfg_.window), cfg_.policy);
  }

  const std::uint64_t seq = c.next_seq++;
  WireResponse resp{req.client_id + "-" + std::to_string(seq), out.label, out.confidence};
  if (cfg_.reject_on_suspect && out.adversarial_suspect) {
    resp.label = -1;
    resp.confidence = 0.0;
  }
  append_audit({{"timestamp", now},
                {"client_id", req.client_id},
                {"request_id", resp.request_id},
                {"seq", seq},
                {"label", resp.label},
                {"confidence", resp.confidence},
                {"adversarial_suspect", out.adversarial_suspect},
                {"state", to_string(c.session.state())},
                {"model_ids", out.model_ids},
                {"served_by_decoy", out.served_by_decoy}});
  return resp;
}

std::string GatewayState::handle_line(const std::string& line) {
  try {
    return handle_request(parse_request(line)).to_json().dump();
  } catch (const WireError& e) {
    return error_line(e.code());
  } catch (const std::exception&) {
    return error_line("internal");
  }
}

std::vector<Json> GatewayState::audit_entries() const {
  std::lock_guard lk(audit_mu_);
  return audit_;
}

std::size_t GatewayState::handled_count() const {
  std::lock_guard lk(audit_mu_);
  return audit_.size();
}

std::optional<SessionState> GatewayState::session_state(const std::string& client_id) const {
  Client* c = nullptr;
  {
    std::lock_guard lk(clients_mu_);
    const auto it = clients_.find(client_id);
    if (it == clients_.end()) return std::nullopt;
    c = it->second.get();
  }
  std::lock_guard lk(c->mu);
  return c->session.state();
}

void export_audit(const GatewayState& state, const std::filesystem::path& path) {
  std::string out;
  for (const Json& e : state.audit_entries()) out += e.dump() + "\n";
  write_file_atomic(path, out);
}

// --- server ------------------------------------------------------------------

GatewayServer::GatewayServer(GatewayState& state) : state_(state) {}

GatewayServer::~GatewayServer() {
  stopping_ = true;
  {
    std::lock_guard lk(conn_mu_);
    connections_.clear();
  }
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

void GatewayServer::start(const std::string& host, int port) {
  if (listen_fd_ >= 0) throw ContractError("gateway server already started");
  addrinfo* res = lookup(host, port, true);
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw IoError(std::string("socket: ") + std::strerror(errno));
  }
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd, res->ai_addr, res->ai_addrlen) != 0 || ::listen(fd, 64) != 0) {
    const std::string why = std::strerror(errno);
    ::freeaddrinfo(res);
    ::close(fd);
    throw IoError("cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
  }
  ::freeaddrinfo(res);
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  listen_fd_ = fd;
}

void GatewayServer::run(const std::atomic<bool>* external_stop) {
  if (listen_fd_ < 0) throw ContractError("gateway server not started");
  while (!stopping_ && !(external_stop && external_stop->load())) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, kPollMillis);
    if (rc <= 0 || !(p.revents & POLLIN)) continue;
    const int conn = ::accept(listen_fd_, nullptr, nullptr);
    if (conn < 0) continue;
    std::lock_guard lk(conn_mu_);
    connections_.emplace_back([this, conn] { serve_connection(conn); });
  }
  stopping_ = true;
  std::lock_guard lk(conn_mu_);
  connections_.clear();
}

void GatewayServer::serve_connection(int fd) {
  std::string buf;
  char chunk[8192];
  while (!stopping_) {
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, kPollMillis);
    if (rc == 0) continue;
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) break;
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    buf.append(chunk, static_cast<std::size_t>(n));
    std::size_t start = 0, nl;
    bool ok = true;
    while (ok && (nl = buf.find('\n', start)) != std::string::npos) {
      std::string line = buf.substr(start, nl - start);
      start = nl + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      ok = send_all(fd, state_.handle_line(line) + "\n");
    }
    buf.erase(0, start);
    if (buf.size() > kMaxLineBytes) {
      buf.clear();
      ok = ok && send_all(fd, error_line("parse") + "\n");
    }
    if (!ok) break;
  }
  ::close(fd);
}

void serve(const GatewayConfig& cfg, const std::atomic<bool>& stop, const std::function<void(int)>& on_ready) {
  cfg.validate();
  GatewayState state(load_gateway_models(cfg), cfg);
  GatewayServer server(state);
  server.start(cfg.host, cfg.port);
  if (on_ready) on_ready(server.port());
  server.run(&stop);
  export_audit(state, cfg.audit_path);
}

// --- client ------------------------------------------------------------------

GatewayClient::GatewayClient(const std::string& host, int port) {
  addrinfo* res = lookup(host, port, false);
  fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd_ < 0 || ::connect(fd_, res->ai_addr, res->ai_addrlen) != 0) {
    const std::string why = std::strerror(errno);
    ::freeaddrinfo(res);
    if (fd_ >= 0) ::close(fd_);
    throw IoError("cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
  }
  ::freeaddrinfo(res);
}

GatewayClient::~GatewayClient() {
  if (fd_ >= 0) ::close(fd_);
}

std::string GatewayClient::round_trip(const std::string& line) {
  if (!send_all(fd_, line + "\n")) throw IoError("gateway connection closed while sending");
  char chunk[8192];
  std::size_t nl;
  while ((nl = buffer_.find('\n')) == std::string::npos) {
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw IoError("gateway connection closed while reading");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
  std::string out = buffer_.substr(0, nl);
  buffer_.erase(0, nl + 1);
  return out;
}

}  // namespace dnd
