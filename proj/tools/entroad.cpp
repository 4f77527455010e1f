// entroad command-line driver.

#include "entroad/entroad.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace entroad;

namespace {

struct Common {
  std::string config_path;
  int threads = 0;
  std::map<std::string, std::string> overrides; // key -> raw flag text
};

RunConfig resolve_config(const Common& common) {
  RunConfig cfg;
  if (!common.config_path.empty()) {
    apply_toml_file(cfg, common.config_path);
  }
  apply_seed_env(cfg);
  for (const auto& [key, text] : common.overrides) {
    find_config_key(key).set(cfg, text);
  }
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const io::json& j) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << j.dump(2) << '\n';
}

double pct1(double v) { return std::round(v * 1000.0) / 10.0; }

io::json report_json(const EvalReport& r, const std::string& config_hash) {
  return {{"image_auroc", pct1(r.image_auroc)}, {"image_ap", pct1(r.image_ap)},
          {"pixel_auroc", pct1(r.pixel_auroc)}, {"aupro", pct1(r.aupro)},
          {"n_images", r.n_images},             {"n_pixels", r.n_pixels},
          {"n_regions", r.n_regions},           {"config_hash", config_hash}};
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return io::fnv1a(ss.str());
}

std::vector<FeatureBundle> load_bundles(const fs::path& dir) {
  auto bundles = read_bundle_dir(dir);
  if (bundles.empty()) {
    throw DataError("no bundles in " + dir.string());
  }
  return bundles;
}

ModelConfig with_data_width(ModelConfig mc, const std::vector<FeatureBundle>& bundles) {
  mc.d = bundles.front().d;
  return mc;
}

std::vector<AnomalyResult> infer_all(const std::vector<FeatureBundle>& bundles, const Model<float>& model,
                                     DomainPrior prior) {
  std::vector<AnomalyResult> out(bundles.size());
  parallel_for(bundles.size(), [&](std::size_t i) { out[i] = infer<float>(bundles[i], model, prior); });
  return out;
}

// --------------------------------------------------------------------------

int cmd_synth(const Common& common, const fs::path& out_dir, int holdout) {
  const RunConfig cfg = resolve_config(common);
  if (holdout < 0 || holdout >= cfg.synthetic.n_images) {
    throw UsageError("holdout must lie in [0, n_images)");
  }
  const auto bundles = gen_synthetic(cfg.synthetic);
  const std::size_t n_train = bundles.size() - static_cast<std::size_t>(holdout);
  fs::create_directories(out_dir / "train");
  if (holdout > 0) {
    fs::create_directories(out_dir / "test");
  }
  io::json entries = io::json::array();
  std::uint64_t h = io::fnv1a("manifest");
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const fs::path rel = fs::path(i < n_train ? "train" : "test") / (bundles[i].image_id + ".eadb");
    write_bundle(bundles[i], out_dir / rel);
    const std::uint64_t fh = file_hash(out_dir / rel);
    h = io::fnv1a(io::hex64(fh), h);
    entries.push_back({{"image_id", bundles[i].image_id},
                       {"file", rel.generic_string()},
                       {"label", bundles[i].label.value_or(0)},
                       {"hash", io::hex64(fh)}});
  }
  const io::json manifest = {{"n_images", bundles.size()},
                             {"n_train", n_train},
                             {"n_test", holdout},
                             {"config_hash", config_hash(cfg)},
                             {"manifest_hash", io::hex64(h)},
                             {"entries", entries}};
  write_json(out_dir / "manifest.json", manifest);
  std::cout << "wrote " << bundles.size() << " bundles, manifest hash " << io::hex64(h) << '\n';
  return 0;
}

int cmd_train(const Common& common, const fs::path& data, const fs::path& out, std::string history_path) {
  RunConfig cfg = resolve_config(common);
  const auto bundles = load_bundles(data);
  cfg.train.model = with_data_width(cfg.train.model, bundles);
  const auto result = train<float>(bundles, cfg.train);
  const std::string hash = config_hash(cfg);
  save_checkpoint(result.model, out, hash);
  if (history_path.empty()) {
    history_path = out.string() + ".history.csv";
  }
  write_history_csv(result.history, history_path);
  std::cout << "trained on " << bundles.size() << " bundles, " << result.history.size()
            << " batches; checkpoint " << out.string() << " (config " << hash << ")\n";
  return 0;
}

DomainPrior prior_or_default(const std::string& s, const Model<float>& model) {
  return s.empty() ? model.config.inference.prior : parse_prior(s);
}

int cmd_infer(const Common& common, const fs::path& model_path, const std::string& bundle, const std::string& bundle_dir,
              const std::string& prior_s, const std::string& out_map, const std::string& out_json,
              const std::string& out_dir, bool png) {
  (void)resolve_config(common);
  const Model<float> model = load_checkpoint<float>(model_path);
  const DomainPrior prior = prior_or_default(prior_s, model);
  const std::string hash = io::hex64(io::fnv1a(to_json(model.config).dump()));
  if (!bundle.empty() == !bundle_dir.empty()) {
    throw UsageError("give exactly one of --bundle or --bundle-dir");
  }
  if (!bundle.empty()) {
    const FeatureBundle b = read_bundle(bundle);
    const AnomalyResult r = infer<float>(b, model, prior);
    io::json j = result_summary(r);
    j["config_hash"] = hash;
    if (!out_map.empty()) {
      write_heatmap<double>(out_map, r.map, r.H, r.W);
    }
    if (!out_json.empty()) {
      write_json(out_json, j);
    }
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      write_prediction(r, fs::path(out_dir) / (r.image_id + ".eapm"), hash);
    }
    std::cout << j.dump() << '\n';
    return 0;
  }
  if (out_dir.empty()) {
    throw UsageError("--bundle-dir needs --out-dir");
  }
  const auto bundles = load_bundles(bundle_dir);
  const auto results = infer_all(bundles, model, prior);
  fs::create_directories(out_dir);
  io::json all = io::json::array();
  for (const auto& r : results) {
    write_prediction(r, fs::path(out_dir) / (r.image_id + ".eapm"), hash);
    if (png) {
      write_heatmap<double>(fs::path(out_dir) / (r.image_id + ".png"), r.map, r.H, r.W);
    }
    io::json j = result_summary(r);
    j["config_hash"] = hash;
    all.push_back(j);
  }
  write_json(out_json.empty() ? fs::path(out_dir) / "scores.json" : fs::path(out_json), all);
  std::cout << "scored " << results.size() << " bundles into " << out_dir << '\n';
  return 0;
}

int cmd_eval(const Common& common, const fs::path& pred_dir, const fs::path& bundle_dir, const fs::path& out) {
  const RunConfig cfg = resolve_config(common);
  const auto bundles = load_bundles(bundle_dir);
  std::vector<AnomalyResult> results;
  for (const auto& b : bundles) {
    const fs::path p = pred_dir / (b.image_id + ".eapm");
    if (!fs::exists(p)) {
      throw DataError("no prediction for " + b.image_id + " in " + pred_dir.string());
    }
    results.push_back(read_prediction(p));
  }
  const EvalReport rep = evaluate(results, bundles, cfg.eval);
  const io::json j = report_json(rep, config_hash(cfg));
  if (!out.empty()) {
    write_json(out, j);
  }
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_entropy(const Common& common, const fs::path& bundle_path, const fs::path& out) {
  const RunConfig cfg = resolve_config(common);
  const FeatureBundle b = read_bundle(bundle_path);
  const EntropyMap e = compute_entropy_map(b, cfg.train.model.layers);
  write_heatmap<double>(out, e.normalized, b.h_p, b.w_p);
  std::cout << io::json{{"image_id", b.image_id},
                        {"layers", e.layers_used},
                        {"raw_min", e.raw.minCoeff()},
                        {"raw_max", e.raw.maxCoeff()},
                        {"normalized_std", population_stddev<double>(e.normalized)}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_route(const Common& common, const fs::path& model_path, const fs::path& bundle_path, int top) {
  (void)resolve_config(common);
  const Model<float> model = load_checkpoint<float>(model_path);
  const FeatureBundle b = read_bundle(bundle_path);
  const FrozenInputs<float> in = prepare_inputs<float>(b, model);
  auto top_of = [&](const VecF& w) {
    std::vector<int> idx(static_cast<std::size_t>(w.size()));
    std::iota(idx.begin(), idx.end(), 0);
    const auto k = static_cast<std::size_t>(std::min<Eigen::Index>(top, w.size()));
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](int a, int c) { return w[a] > w[c]; });
    io::json out = io::json::array();
    for (std::size_t i = 0; i < k; ++i) {
      out.push_back({{"patch", idx[i]}, {"weight", w[idx[i]]}});
    }
    return out;
  };
  const io::json j = {{"image_id", b.image_id},
                      {"gate", in.tokens.g},
                      {"p_max", in.evidence.maxCoeff()},
                      {"entropy_std", population_stddev<double>(in.entropy.normalized)},
                      {"t_a_norm", in.tokens.t_a.norm()},
                      {"t_n_norm", in.tokens.t_n.norm()},
                      {"top_anomaly_weights", top_of(in.tokens.w_a)},
                      {"top_normal_weights", top_of(in.tokens.w_n)}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) {
      out.push_back(detail::parse_value<double>(item, "grid"));
    }
  }
  if (out.empty()) {
    throw UsageError("sweep grid is empty");
  }
  return out;
}

int cmd_sweep(const Common& common, const std::string& param, const std::string& grid_text, const fs::path& train_dir,
              const fs::path& test_dir, const std::string& model_path, const fs::path& out) {
  const RunConfig base = resolve_config(common);
  const std::vector<double> grid = parse_grid(grid_text);
  if (param != "alpha_beta" && param != "lambda" && param != "T") {
    throw UsageError("sweep parameter must be alpha_beta, lambda or T");
  }
  for (double v : grid) {
    if (!(v >= 0.0 && v <= 1.0) && param != "T") {
      throw UsageError("alpha_beta and lambda grids must lie in [0,1]");
    }
    if (param == "T" && !(v > 0.0)) {
      throw UsageError("router temperature grid values must be > 0");
    }
  }
  const auto test = load_bundles(test_dir);
  std::vector<FeatureBundle> train_set;
  const bool retrain = model_path.empty();
  if (retrain) {
    train_set = load_bundles(train_dir);
  } else if (param == "lambda") {
    throw UsageError("a lambda sweep changes training; omit --model to retrain per point");
  }

  std::ofstream csv(out);
  if (!csv) {
    throw DataError("cannot write " + out.string());
  }
  csv << "param,value,image_auroc,image_ap,pixel_auroc,aupro\n";
  csv.precision(9);
  std::optional<Model<float>> fixed;
  if (!retrain) {
    fixed = load_checkpoint<float>(model_path);
  }
  for (double v : grid) {
    RunConfig cfg = base;
    ModelConfig& mc = cfg.train.model;
    if (param == "alpha_beta") {
      mc.inference.alpha = v;
      mc.inference.beta = 1.0 - v;
    } else if (param == "lambda") {
      mc.loss.lambda_a = v;
      mc.loss.lambda_b = 1.0 - v;
    } else {
      mc.routing.temperature = v;
    }
    Model<float> model;
    if (retrain) {
      mc.d = train_set.front().d;
      model = train<float>(train_set, cfg.train).model;
    } else {
      // Only the swept value changes; everything else stays as trained.
      model = *fixed;
      if (param == "alpha_beta") {
        model.config.inference.alpha = mc.inference.alpha;
        model.config.inference.beta = mc.inference.beta;
      } else {
        model.config.routing.temperature = mc.routing.temperature;
      }
    }
    const auto results = infer_all(test, model, model.config.inference.prior);
    const EvalReport r = evaluate(results, test, cfg.eval);
    csv << param << ',' << v << ',' << r.image_auroc << ',' << r.image_ap << ',' << r.pixel_auroc << ',' << r.aupro
        << '\n';
    std::cout << param << '=' << v << " image_auroc=" << r.image_auroc << " pixel_auroc=" << r.pixel_auroc << '\n';
  }
  return 0;
}

int cmd_grad_check(const Common& common, const fs::path& data, const std::string& model_path, int images,
                   const std::string& subset_text, double h, int coords) {
  RunConfig cfg = resolve_config(common);
  auto bundles = load_bundles(data);
  Model<double> model;
  if (!model_path.empty()) {
    model = load_checkpoint<float>(model_path).cast<double>();
  } else {
    cfg.train.model = with_data_width(cfg.train.model, bundles);
    TrainConfig tc = cfg.train;
    tc.epochs_stage1 = 0;
    const auto s1 = train_stage1<double>(bundles, tc);
    model = assemble_model<double>(tc.model, s1.projection, s1.bank);
  }
  if (images < 1) {
    throw UsageError("--images must be >= 1");
  }
  bundles.resize(std::min<std::size_t>(bundles.size(), static_cast<std::size_t>(images)));
  std::vector<std::string> subset;
  std::stringstream ss(subset_text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) {
      subset.push_back(item);
    }
  }
  const GradCheckReport rep = grad_check(model, bundles, subset, h, static_cast<std::size_t>(coords), model.config.seed);
  std::map<std::string, double> worst;
  for (const auto& e : rep.entries) {
    worst[e.tensor] = std::max(worst[e.tensor], e.rel_err);
  }
  io::json per = io::json::object();
  for (const auto& [k, v] : worst) {
    per[k] = v;
  }
  std::cout << io::json{{"max_rel_err", rep.max_rel_err}, {"coordinates", rep.entries.size()}, {"per_param", per}}.dump(2)
            << '\n';
  return rep.max_rel_err < 1e-4 ? 0 : 3;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"entroad: entropy-guided zero-shot anomaly detection on exported feature bundles"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "TOML run configuration")->check(CLI::ExistingFile);
  app.add_option("--threads", common.threads, "worker threads (default: all cores)");

  auto* hp = app.add_option_group("Hyperparameters", "override config keys (flags > config > defaults)");
  std::map<std::string, std::string> raw;
  for (const auto& k : config_keys()) {
    raw[k.key];
    hp->add_option("--" + k.key, raw[k.key], k.help + " [" + k.section + ", default " + default_text(k) + "]");
  }

  auto* synth = app.add_subcommand("synth", "generate synthetic bundles and a manifest");
  std::string synth_out;
  int holdout = 100;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--holdout", holdout, "trailing images written to test/ (default 100)");

  auto* train_cmd = app.add_subcommand("train", "run both training stages");
  std::string data_dir, ckpt, history;
  train_cmd->add_option("--data", data_dir, "directory of training bundles")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", ckpt, "checkpoint path")->required();
  train_cmd->add_option("--history", history, "history CSV (default <out>.history.csv)");

  auto* infer_cmd = app.add_subcommand("infer", "score bundles with a trained model");
  std::string model_path, bundle_path, bundle_dir, prior, out_map, out_json, out_dir;
  bool png = false;
  infer_cmd->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--bundle", bundle_path, "single bundle")->check(CLI::ExistingFile);
  infer_cmd->add_option("--bundle-dir", bundle_dir, "directory of bundles")->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--prior", prior, "structured|diffuse (default from model)");
  infer_cmd->add_option("--out-map", out_map, "fused heatmap PNG (single mode)");
  infer_cmd->add_option("--out-json", out_json, "summary JSON");
  infer_cmd->add_option("--out-dir", out_dir, "raw prediction directory");
  infer_cmd->add_flag("--png", png, "also write heatmaps in directory mode");

  auto* eval_cmd = app.add_subcommand("eval", "compute image/pixel metrics from predictions");
  std::string pred_dir, eval_bundles, report;
  eval_cmd->add_option("--pred-dir", pred_dir, "prediction directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--bundle-dir", eval_bundles, "ground-truth bundles")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", report, "report JSON");

  auto* entropy_cmd = app.add_subcommand("entropy", "write the normalized entropy map of a bundle");
  std::string ent_bundle, ent_out;
  entropy_cmd->add_option("--bundle", ent_bundle, "bundle")->required()->check(CLI::ExistingFile);
  entropy_cmd->add_option("--out", ent_out, "PNG path")->required();

  auto* route_cmd = app.add_subcommand("route", "print gate and routing weights for a bundle");
  std::string route_model, route_bundle;
  int route_top = 5;
  route_cmd->add_option("--model", route_model, "checkpoint")->required()->check(CLI::ExistingFile);
  route_cmd->add_option("--bundle", route_bundle, "bundle")->required()->check(CLI::ExistingFile);
  route_cmd->add_option("--top", route_top, "weights to list per router (default 5)");

  auto* sweep_cmd = app.add_subcommand("sweep", "metric curves over a hyperparameter grid");
  std::string sweep_param, sweep_grid, sweep_train, sweep_test, sweep_model, sweep_out;
  sweep_cmd->add_option("--param", sweep_param, "alpha_beta | lambda | T")->required();
  sweep_cmd->add_option("--grid", sweep_grid, "comma-separated values")->required();
  sweep_cmd->add_option("--train-dir", sweep_train, "training bundles (retrain per point)");
  sweep_cmd->add_option("--test-dir", sweep_test, "evaluation bundles")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--model", sweep_model, "fixed checkpoint instead of retraining");
  sweep_cmd->add_option("--out", sweep_out, "CSV path")->required();

  auto* gc_cmd = app.add_subcommand("grad-check", "compare Stage-2 gradients with finite differences");
  std::string gc_data, gc_model, gc_subset;
  int gc_images = 2, gc_coords = 200;
  double gc_h = 1e-5;
  gc_cmd->add_option("--data", gc_data, "bundle directory")->required()->check(CLI::ExistingDirectory);
  gc_cmd->add_option("--model", gc_model, "checkpoint (default: fresh model)");
  gc_cmd->add_option("--images", gc_images, "batch size (default 2)");
  gc_cmd->add_option("--subset", gc_subset, "comma-separated parameter names (default all)");
  gc_cmd->add_option("--step", gc_h, "finite-difference step (default 1e-5)");
  gc_cmd->add_option("--coords", gc_coords, "sampled coordinates (default 200)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
  }

  for (const auto& [key, text] : raw) {
    if (!text.empty()) {
      common.overrides[key] = text;
    }
  }
  if (common.threads > 0) {
    set_num_threads(common.threads);
  }

  try {
    if (*synth) {
      return cmd_synth(common, synth_out, holdout);
    }
    if (*train_cmd) {
      return cmd_train(common, data_dir, ckpt, history);
    }
    if (*infer_cmd) {
      return cmd_infer(common, model_path, bundle_path, bundle_dir, prior, out_map, out_json, out_dir, png);
    }
    if (*eval_cmd) {
      return cmd_eval(common, pred_dir, eval_bundles, report);
    }
    if (*entropy_cmd) {
      return cmd_entropy(common, ent_bundle, ent_out);
    }
    if (*route_cmd) {
      return cmd_route(common, route_model, route_bundle, route_top);
    }
    if (*sweep_cmd) {
      return cmd_sweep(common, sweep_param, sweep_grid, sweep_train, sweep_test, sweep_model, sweep_out);
    }
    if (*gc_cmd) {
      return cmd_grad_check(common, gc_data, gc_model, gc_images, gc_subset, gc_h, gc_coords);
    }
  } catch (const Error& e) {
    std::cerr << "entroad: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "entroad: internal error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::numerical);
  }
  return 0;
}
