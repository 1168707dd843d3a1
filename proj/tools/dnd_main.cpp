// dnd: experiment driver and gateway front end.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dnd/checkpoint.hpp"
#include "dnd/errors.hpp"
#include "dnd/harness.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config JSON (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Root seed; overrides DND_SEED and the config");
}

/// Config file, then DND_SEED, then --seed.
dnd::ExperimentConfig resolve_config(const Common& c) {
  dnd::ExperimentConfig cfg = c.config.empty() ? dnd::ExperimentConfig{} : dnd::ExperimentConfig::load(c.config);
  if (const char* env = std::getenv("DND_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw dnd::ValidationError(std::string("DND_SEED is not an unsigned integer: ") + env);
    }
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void print_timings(const dnd::StageTimings& t) {
  for (const auto& [stage, secs] : t) std::cerr << "  " << stage << ": " << secs << " s\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale deception and randomization defense experiments"};
  app.require_subcommand(1);

  Common common;
  std::string out_dir = "out";
  std::string models_dir = "out";
  std::string in_dir;
  std::string gateway_config;
  std::string host = "127.0.0.1";
  std::optional<int> port;
  std::optional<std::string> audit;
  std::string transcript_path;
  dnd::RedTeamConfig rt;

  auto* gen = app.add_subcommand("gen-data", "Write train.dnd and test.dnd");
  add_common(gen, common);
  gen->add_option("--out", out_dir, "Output directory");

  auto* search = app.add_subcommand("search", "Run the diversity search and write search.json");
  add_common(search, common);
  search->add_option("--out", out_dir, "Output directory");

  auto* train = app.add_subcommand("train", "Train every model and write checkpoints plus gateway.json");
  add_common(train, common);
  train->add_option("--out", out_dir, "Output directory");

  auto* attack = app.add_subcommand("attack", "Evaluate clean and attack scenarios on trained checkpoints");
  add_common(attack, common);
  attack->add_option("--models", models_dir, "Directory written by 'train'");
  attack->add_option("--out", out_dir, "Report directory");

  auto* serve = app.add_subcommand("serve", "Serve the defended gateway");
  serve->add_option("--config", gateway_config, "gateway.json written by 'train'")->required();
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port; 0 picks a free one");
  serve->add_option("--audit", audit, "Audit log path written on shutdown");
  serve->add_option("--seed", common.seed, "Gateway root seed");

  auto* redteam = app.add_subcommand("redteam", "Scripted attacker sessions against a running gateway");
  redteam->add_option("--host", host, "Gateway host");
  redteam->add_option("--port", port, "Gateway port")->required();
  redteam->add_option("--models", models_dir, "Directory with attacker.dndw and test.dnd");
  redteam->add_option("--requests", rt.requests, "Total requests");
  redteam->add_option("--clients", rt.clients, "Distinct client ids");
  redteam->add_option("--session-length", rt.session_length, "Requests per scripted session");
  redteam->add_option("--seed", rt.seed, "Script seed");
  redteam->add_option("--transcript", transcript_path, "Write request/response lines here");

  auto* report = app.add_subcommand("report", "Re-emit report files and check rates against the sample logs");
  report->add_option("--in", in_dir, "Directory holding report.json and samples.jsonl")->required();
  report->add_option("--out", out_dir, "Output directory");

  auto* run = app.add_subcommand("run", "Train, evaluate and write the full report");
  add_common(run, common);
  run->add_option("--out", out_dir, "Report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*gen) {
      const auto cfg = resolve_config(common);
      const auto [tr, te] = dnd::gen_train_test(cfg.data, cfg.seed);
      std::filesystem::create_directories(out_dir);
      dnd::save_dataset(tr, std::filesystem::path(out_dir) / "train.dnd");
      dnd::save_dataset(te, std::filesystem::path(out_dir) / "test.dnd");
      std::cout << "wrote " << tr.size() << " train and " << te.size() << " test samples to " << out_dir << "\n";
    } else if (*search) {
      const auto cfg = resolve_config(common);
      const auto [tr, te] = dnd::gen_train_test(cfg.data, cfg.seed);
      const dnd::SearchResult r =
          dnd::search_ensemble(cfg.space, tr, te, cfg.search, dnd::derive_seed(cfg.seed, "search"));
      std::filesystem::create_directories(out_dir);
      dnd::write_file_atomic(std::filesystem::path(out_dir) / "search.json", r.report().dump(2) + "\n");
      if (r.warning) std::cerr << "warning: fewer survivors than the ensemble size\n";
      std::cout << "selected " << r.chosen.size() << " of " << r.candidates.size() << " candidates\n";
    } else if (*train) {
      const auto cfg = resolve_config(common);
      dnd::StageTimings t;
      const dnd::TrainedSystem sys = dnd::train_system(cfg, &t);
      dnd::save_system(sys, cfg, out_dir);
      print_timings(t);
      std::cout << "checkpoints in " << out_dir << " (config " << cfg.hash() << ")\n";
    } else if (*attack) {
      auto [sys, cfg] = dnd::load_system(models_dir);
      if (!common.config.empty() || common.seed || std::getenv("DND_SEED") != nullptr) {
        Common c = common;
        const auto override_cfg = resolve_config(c);
        cfg.seed = override_cfg.seed;
        cfg.attacker = override_cfg.attacker;
        cfg.defense = override_cfg.defense;
      }
      cfg.scenarios = {"a_clean", "b_whitebox", "c_transfer_static", "d_transfer_dnd"};
      dnd::StageTimings t;
      const dnd::Report r = dnd::evaluate_system(sys, cfg, &t);
      dnd::write_report(r, out_dir);
      print_timings(t);
      std::cout << "report in " << out_dir << "\n";
    } else if (*serve) {
      const std::filesystem::path path(gateway_config);
      dnd::Json j;
      try {
        j = dnd::Json::parse(dnd::read_file(path));
      } catch (const dnd::Json::parse_error& e) {
        throw dnd::ValidationError(path.string() + ": " + e.what());
      }
      dnd::GatewayConfig cfg = dnd::GatewayConfig::from_json(j, path.parent_path());
      cfg.host = host;
      if (port) cfg.port = *port;
      if (audit) cfg.audit_path = *audit;
      if (common.seed) cfg.root_seed = *common.seed;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      dnd::serve(cfg, g_stop, [](int p) { std::cout << "listening on port " << p << std::endl; });
      std::cout << "audit written to " << cfg.audit_path.string() << "\n";
    } else if (*redteam) {
      const std::filesystem::path dir(models_dir);
      const dnd::Classifier surrogate = dnd::load_classifier(dir / "attacker.dndw");
      const dnd::Dataset data = dnd::load_dataset(dir / "test.dnd", dnd::Split::test);
      dnd::GatewayClient client(host, *port);
      const auto lines = dnd::run_redteam(client, surrogate, data, rt);
      if (!transcript_path.empty()) {
        std::string text;
        for (const auto& l : lines) text += l + "\n";
        dnd::write_file_atomic(transcript_path, text);
      }
      std::cout << "sent " << lines.size() / 2 << " requests\n";
    } else if (*report) {
      const dnd::Report r = dnd::load_report(in_dir);
      dnd::write_report(r, out_dir);
      int mismatches = 0;
      for (const auto& [key, value] : dnd::recount_rates(r.samples)) {
        const auto dot = key.find('.');
        dnd::Json node = r.summary.at("scenarios").at(key.substr(0, dot));
        for (std::size_t start = dot + 1;;) {
          const auto next = key.find('.', start);
          node = node.at(key.substr(start, next - start));
          if (next == std::string::npos) break;
          start = next + 1;
        }
        const bool ok = std::abs(node.get<double>() - value) <= 1e-12;
        mismatches += !ok;
        std::cout << (ok ? "ok       " : "MISMATCH ") << key << " = " << value << "\n";
      }
      if (mismatches > 0) return kExitRuntime;
    } else if (*run) {
      const auto cfg = resolve_config(common);
      const dnd::Report r = dnd::run_experiment(cfg);
      dnd::write_report(r, out_dir);
      print_timings(r.timings);
      std::cout << "report in " << out_dir << " (config " << cfg.hash() << ")\n";
    }
  } catch (const dnd::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const dnd::DimensionError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
