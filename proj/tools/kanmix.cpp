#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fetch.hpp"
#include "kanmix/kanmix.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kanmix;
using cli::RunConfig;

namespace {

constexpr const char* kCsvHeader = "dataset,epoch_time_s,test_time_s,est_memory_mb,test_accuracy";

enum Exit { kOk = 0, kRuntime = 1, kConfig = 2, kData = 3 };

/// Flag values kept as strings and applied through RunConfig::set, the same
/// path config files take.
struct Overrides {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  bool residual = false;
  CLI::Option* residual_opt = nullptr;

  void add(CLI::App* app, const std::vector<std::string>& keys) {
    for (const auto& key : keys) {
      std::string flag = "--" + key;
      for (auto& ch : flag) {
        if (ch == '_') ch = '-';
      }
      options[key] = app->add_option(flag, values[key]);
    }
  }

  void add_residual(CLI::App* app) {
    residual_opt = app->add_flag("--residual,!--no-residual", residual,
                                 "pre-norm residual mixer blocks");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) {
      for (const auto& [k, v] : cli::read_config_file(config_file)) cfg.set(k, v);
    }
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) cfg.set(key, values.at(key));
    }
    if (residual_opt && residual_opt->count() > 0) cfg.set("residual", residual ? "true" : "false");
    return cfg;
  }
};

const std::vector<std::string> kModelKeys = {"dataset",   "patch_size", "n_channels",   "n_hiddens",
                                             "depth",     "spline_order", "grid_size",  "grid_min",
                                             "grid_max",  "image_size", "in_channels",  "n_output",
                                             "seed"};
const std::vector<std::string> kTrainKeys = {"epochs",      "batch_size",  "eval_batch_size",
                                             "lr",          "weight_decay", "data_dir",
                                             "limit_train", "limit_test"};

std::string fmt(double v) { return json(v).dump(); }

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_splits(const RunConfig& cfg, bool need_train) {
  Splits s;
  if (need_train) {
    s.train = load_named(cfg.dataset, cfg.data_dir, true);
    if (cfg.limit_train) s.train = head(s.train, cfg.limit_train);
  }
  s.test = load_named(cfg.dataset, cfg.data_dir, false);
  if (cfg.limit_test) s.test = head(s.test, cfg.limit_test);
  return s;
}

struct RunResult {
  RunMetrics metrics;
  double mean_epoch_time_s = 0.0;
};

RunResult run_training(const RunConfig& cfg, const Splits& data, bool verbose) {
  KanMixer<float> model(cfg.model);
  if (verbose) {
    std::cout << "model: " << model.param_count() << " parameters, " << cfg.model.n_tokens()
              << " tokens, residual=" << (cfg.model.residual ? "true" : "false") << "\n"
              << "data: " << data.train.size() << " train, " << data.test.size() << " test ("
              << cfg.dataset << ")" << std::endl;
  }
  if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, model);

  TrainOptions opts;
  opts.epochs = cfg.epochs;
  opts.batch_size = cfg.batch_size;
  opts.eval_batch_size = cfg.eval_batch_size;
  opts.seed = cfg.seed;
  opts.adam.lr = cfg.lr;
  opts.adam.weight_decay = cfg.weight_decay;
  opts.on_epoch = [&](const EpochMetrics& e) {
    if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, model);
    if (verbose) {
      std::printf("epoch %zu/%zu  loss %.5f  time %.1fs\n", e.epoch, cfg.epochs, e.train_loss,
                  e.epoch_time_s);
      std::fflush(stdout);
    }
  };
  RunResult r;
  r.metrics = train(model, data.train, data.test, opts);
  for (const auto& e : r.metrics.epochs) r.mean_epoch_time_s += e.epoch_time_s;
  if (!r.metrics.epochs.empty()) r.mean_epoch_time_s /= static_cast<double>(r.metrics.epochs.size());
  return r;
}

std::string csv_row(const std::string& dataset, const RunResult& r) {
  std::ostringstream os;
  os << dataset << ',' << fmt(r.mean_epoch_time_s) << ',' << fmt(r.metrics.test_time_s) << ','
     << fmt(r.metrics.est_memory_mb) << ',' << fmt(r.metrics.test_accuracy);
  return os.str();
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Rewrites the CSV with `row` appended, creating it with a header if needed.
void append_csv(const fs::path& path, const std::string& row) {
  std::string text = fs::exists(path) ? read_text(path) : std::string(kCsvHeader) + "\n";
  if (!text.empty() && text.back() != '\n') text += '\n';
  text += row + "\n";
  write_file_atomic(path, text);
}

int cmd_train(const Overrides& ov) {
  RunConfig cfg = ov.resolve();
  cfg.finalize();
  const Splits data = load_splits(cfg, true);
  const RunResult r = run_training(cfg, data, true);
  std::cout << "test_accuracy " << fmt(r.metrics.test_accuracy) << "  test_time "
            << fmt(r.metrics.test_time_s) << "s  est_memory " << fmt(r.metrics.est_memory_mb)
            << " MB" << std::endl;

  if (!cfg.metrics.empty()) {
    json epochs = json::array();
    for (const auto& e : r.metrics.epochs) {
      epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"epoch_time_s", e.epoch_time_s}});
    }
    json doc = {{"config", cfg.to_json()},
                {"param_count", r.metrics.param_count},
                {"epochs", epochs},
                {"dataset", cfg.dataset},
                {"epoch_time_s", r.mean_epoch_time_s},
                {"test_time_s", r.metrics.test_time_s},
                {"est_memory_mb", r.metrics.est_memory_mb},
                {"test_accuracy", r.metrics.test_accuracy}};
    write_file_atomic(cfg.metrics, doc.dump(2) + "\n");
  }
  if (!cfg.csv.empty()) append_csv(cfg.csv, csv_row(cfg.dataset, r));
  return kOk;
}

int cmd_eval(const Overrides& ov) {
  RunConfig cfg = ov.resolve();
  if (cfg.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const auto shape = cli::dataset_shape(cfg.dataset);
  if (cfg.data_dir.empty()) {
    const char* env = std::getenv("DATA_DIR");
    cfg.data_dir = env && *env ? env : "data";
  }
  auto model = load_checkpoint<float>(cfg.checkpoint);
  const auto& mc = model.config();
  if (mc.in_channels != shape.channels || mc.image_height != shape.image_size ||
      mc.image_width != shape.image_size || mc.n_output != shape.classes) {
    throw DataError("checkpoint expects " + std::to_string(mc.in_channels) + "x" +
                    std::to_string(mc.image_height) + "x" + std::to_string(mc.image_width) +
                    " images with " + std::to_string(mc.n_output) + " classes; dataset " +
                    cfg.dataset + " has " + std::to_string(shape.channels) + "x" +
                    std::to_string(shape.image_size) + "x" + std::to_string(shape.image_size) +
                    " with " + std::to_string(shape.classes));
  }
  const Splits data = load_splits(cfg, false);
  const auto res = evaluate(model, data.test, cfg.eval_batch_size);
  std::cout << "accuracy " << fmt(res.accuracy) << "\n"
            << "correct " << res.correct << "/" << res.total << "\n"
            << "test_time_s " << fmt(res.elapsed_s) << std::endl;
  return kOk;
}

struct SweepRow {
  std::string dataset;
  std::size_t n_channels = 0;
  std::size_t n_hiddens = 0;
  std::size_t epochs = 0;
  int line = 0;

  std::string key() const {
    return dataset + "," + std::to_string(n_channels) + "," + std::to_string(n_hiddens) + "," +
           std::to_string(epochs);
  }
};

/// One row per line: dataset, n_channels, n_hiddens, epochs, separated by
/// commas or whitespace. Blank lines, `#` comments and a header are skipped.
std::vector<SweepRow> read_sweep(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read sweep file " + path.string());
  std::vector<SweepRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    for (auto& ch : line) {
      if (ch == ',' || ch == '\t' || ch == '\r') ch = ' ';
    }
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string tok; ls >> tok;) f.push_back(tok);
    if (f.empty() || (rows.empty() && f[0] == "dataset")) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 4) throw ConfigError(where + ": expected dataset,n_channels,n_hiddens,epochs");
    SweepRow r;
    r.dataset = f[0];
    r.n_channels = cli::detail::parse_size(where + " n_channels", f[1]);
    r.n_hiddens = cli::detail::parse_size(where + " n_hiddens", f[2]);
    r.epochs = cli::detail::parse_size(where + " epochs", f[3]);
    r.line = lineno;
    rows.push_back(r);
  }
  return rows;
}

int cmd_bench(const Overrides& ov, const std::string& sweep_path, const std::string& out_path) {
  const RunConfig base = ov.resolve();
  const auto rows = read_sweep(sweep_path);
  const fs::path out(out_path);
  fs::path keys_path = out;
  keys_path += ".keys";

  std::set<std::string> done;
  if (fs::exists(keys_path)) {
    std::istringstream ks(read_text(keys_path));
    for (std::string k; std::getline(ks, k);) {
      if (!k.empty()) done.insert(k);
    }
  }
  if (!fs::exists(out)) write_file_atomic(out, std::string(kCsvHeader) + "\n");

  std::map<std::string, Splits> cache;
  int failures = 0;
  for (const auto& row : rows) {
    const std::string key = row.key();
    if (done.count(key)) {
      std::cout << "skip " << key << " (already recorded)" << std::endl;
      continue;
    }
    try {
      RunConfig cfg = base;
      cfg.dataset = row.dataset;
      cfg.model.n_channels = row.n_channels;
      cfg.model.n_hiddens = row.n_hiddens;
      cfg.epochs = row.epochs;
      cfg.checkpoint.clear();
      cfg.finalize();
      std::cout << "run " << key << std::endl;
      auto it = cache.find(cfg.dataset);
      if (it == cache.end()) it = cache.emplace(cfg.dataset, load_splits(cfg, true)).first;
      const RunResult r = run_training(cfg, it->second, true);
      append_csv(out, csv_row(cfg.dataset, r));
      done.insert(key);
      std::string keys_text;
      for (const auto& k : done) keys_text += k + "\n";
      write_file_atomic(keys_path, keys_text);
      std::cout << "done " << key << " test_accuracy " << fmt(r.metrics.test_accuracy) << std::endl;
    } catch (const std::exception& e) {
      ++failures;
      std::cerr << "error: sweep line " << row.line << " (" << key << ") failed: " << e.what() << std::endl;
    }
  }
  if (failures) {
    std::cerr << failures << " of " << rows.size() << " sweep rows failed" << std::endl;
    return kRuntime;
  }
  return kOk;
}

int cmd_gradcheck(double tolerance, std::vector<bool> modes, std::uint64_t seed) {
  bool ok = true;
  for (bool residual : modes) {
    GradCheckOptions opts;
    opts.seed = seed;
    const auto rep = grad_check_full(tiny_config(residual), tolerance, opts);
    std::printf("gradcheck residual=%s max_rel_error=%.6e worst_group=%s checked=%zu tolerance=%.3e %s\n",
                residual ? "true" : "false", rep.max_rel_error, rep.worst_group.c_str(), rep.checked,
                tolerance, rep.passed ? "PASS" : "FAIL");
    if (!rep.passed) {
      ok = false;
      for (const auto& g : rep.groups) {
        if (g.max_rel_error >= tolerance) {
          std::printf("  group %s max_rel_error=%.6e over %zu entries\n", g.name.c_str(), g.max_rel_error,
                      g.count);
        }
      }
    }
  }
  return ok ? kOk : kRuntime;
}

int cmd_fetch(const std::vector<std::string>& datasets, fetch::FetchOptions opts) {
  if (opts.data_dir.empty()) {
    const char* env = std::getenv("DATA_DIR");
    opts.data_dir = env && *env ? env : "data";
  }
  std::vector<std::string> names;
  for (const auto& d : datasets) {
    if (d == "all") {
      for (const auto& s : fetch::sources()) names.push_back(s.dataset);
    } else {
      fetch::source(d);
      names.push_back(d);
    }
  }
  for (const auto& name : names) {
    const bool fetched = fetch::fetch_dataset(name, opts);
    std::cout << name << (fetched ? ": installed under " : ": already present under ")
              << opts.data_dir.string() << std::endl;
  }
  return kOk;
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "error (" << kind << "): " << e.what() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KAN-Mixer image classifier: training, evaluation and benchmarks"};
  app.require_subcommand(1);

  Overrides train_ov;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint and metrics");
  train_cmd->add_option("--config", train_ov.config_file, "key=value or JSON config file");
  train_ov.add(train_cmd, kModelKeys);
  train_ov.add(train_cmd, kTrainKeys);
  train_ov.add(train_cmd, {"checkpoint", "metrics", "csv"});
  train_ov.add_residual(train_cmd);

  Overrides eval_ov;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
  eval_cmd->add_option("--config", eval_ov.config_file, "key=value or JSON config file");
  eval_ov.add(eval_cmd, {"dataset", "data_dir", "checkpoint", "limit_test", "eval_batch_size"});

  Overrides bench_ov;
  std::string sweep_path;
  std::string bench_out = "bench.csv";
  auto* bench_cmd = app.add_subcommand("bench", "run a sweep file and collect one CSV row per run");
  bench_cmd->add_option("sweep", sweep_path, "rows of dataset,n_channels,n_hiddens,epochs")->required();
  bench_cmd->add_option("--out", bench_out, "results CSV; <out>.keys records finished rows");
  bench_cmd->add_option("--config", bench_ov.config_file, "key=value or JSON config file");
  bench_ov.add(bench_cmd, {"patch_size", "depth", "spline_order", "grid_size", "grid_min", "grid_max",
                           "seed"});
  bench_ov.add(bench_cmd, kTrainKeys);
  bench_ov.add_residual(bench_cmd);

  double tolerance = 1e-3;
  std::uint64_t gc_seed = 7;
  bool gc_residual = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  gc_cmd->add_option("--tolerance", tolerance, "maximum allowed relative error");
  gc_cmd->add_option("--seed", gc_seed, "seed for the random batch");
  auto* gc_res = gc_cmd->add_flag("--residual,!--no-residual", gc_residual,
                                  "check only one block variant (default: both)");

  std::vector<std::string> fetch_sets = {"mnist"};
  fetch::FetchOptions fetch_opts;
  std::string fetch_dir;
  auto* fetch_cmd = app.add_subcommand("fetch", "download and verify datasets");
  fetch_cmd->add_option("--dataset", fetch_sets, "mnist, cifar10, cifar100 or all (repeatable)");
  fetch_cmd->add_option("--data-dir", fetch_dir, "destination (default: $DATA_DIR, then ./data)");
  fetch_cmd->add_option("--mirror", fetch_opts.mirror, "base URL to download from instead of the official one");
  fetch_cmd->add_flag("--force", fetch_opts.force, "download again even if files exist");
  fetch_cmd->add_flag("--keep-archives", fetch_opts.keep_archives, "keep the downloaded archives");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_ov);
    if (*eval_cmd) return cmd_eval(eval_ov);
    if (*bench_cmd) return cmd_bench(bench_ov, sweep_path, bench_out);
    if (*gc_cmd) {
      std::vector<bool> modes = {false, true};
      if (gc_res->count() > 0) modes = {gc_residual};
      return cmd_gradcheck(tolerance, modes, gc_seed);
    }
    if (*fetch_cmd) {
      fetch_opts.data_dir = fetch_dir;
      return cmd_fetch(fetch_sets, fetch_opts);
    }
  } catch (const ConfigError& e) {
    return report("config", e, kConfig);
  } catch (const PatchDivisibility& e) {
    return report("config", e, kConfig);
  } catch (const InvalidGrid& e) {
    return report("config", e, kConfig);
  } catch (const InvalidDim& e) {
    return report("config", e, kConfig);
  } catch (const DataError& e) {
    return report("data", e, kData);
  } catch (const std::exception& e) {
    return report("runtime", e, kRuntime);
  }
  return kRuntime;
}
