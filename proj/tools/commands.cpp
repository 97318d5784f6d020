#include "commands.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <set>

#include "medseg/ablation.hpp"
#include "medseg/checkpoint.hpp"
#include "medseg/data.hpp"
#include "medseg/error.hpp"
#include "medseg/fileutil.hpp"
#include "medseg/metrics.hpp"
#include "medseg/radiomics.hpp"
#include "medseg/trainer.hpp"

namespace medseg::cli {

namespace fs = std::filesystem;

namespace {

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::uint64_t seed = 42;
  int workers = 1;
  bool force = false;
  bool verbose = false;
};

struct Context {
  const Common& common;
  std::ostream& out;
  std::ostream& err;

  void log(const std::string& msg) const {
    if (common.verbose) err << msg << "\n";
  }
};

std::uint64_t module_seed(const Common& c, const std::string& module) { return nn::derive_seed(c.seed, module); }

// Creates `dir` and refuses to replace any of `files` unless forced.
void prepare_outputs(const fs::path& dir, const std::vector<std::string>& files, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError("output path is not a directory: " + dir.string());
  fs::create_directories(dir);
  if (force) return;
  for (const auto& f : files)
    if (fs::exists(dir / f)) throw UsageError("refusing to overwrite " + (dir / f).string() + " (use --force)");
}

void prepare_output_file(const fs::path& file, bool force) {
  if (fs::exists(file) && !force) throw UsageError("refusing to overwrite " + file.string() + " (use --force)");
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

nlohmann::json read_json_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

std::string sub_json(const nlohmann::json& j, const char* key) { return j.contains(key) ? j.at(key).dump() : "{}"; }

// Volume files of a directory keyed by subject id; "_label" siblings skipped.
std::map<std::string, fs::path> volumes_in(const fs::path& dir, bool labels_only = false) {
  if (!fs::is_directory(dir)) throw IoError("directory not found: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_volume_file(entry.path())) continue;
    std::string id = subject_id_from_path(entry.path());
    const bool is_label = id.size() > 6 && id.compare(id.size() - 6, 6, "_label") == 0;
    if (is_label != labels_only) continue;
    if (is_label) id.resize(id.size() - 6);
    out[id] = entry.path();
  }
  return out;
}

SplitManifest split_for(const std::vector<VolumePair>& data, const std::string& mode, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& v : data) ids.push_back(v.ct.subject_id);
  if (mode == "pooled") return split_subjects(ids, seed);
  if (mode == "per_group") {
    // Group = subject id prefix before the first underscore (source dataset).
    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& id : ids) groups[id.substr(0, id.find('_'))].push_back(id);
    return split_subjects_per_group(groups, seed);
  }
  throw ConfigError("split must be \"pooled\" or \"per_group\", got \"" + mode + "\"");
}

std::pair<std::vector<VolumePair>, std::vector<VolumePair>> apply_split(const std::vector<VolumePair>& data,
                                                                        const SplitManifest& split) {
  std::set<std::string> train_ids(split.train_ids.begin(), split.train_ids.end());
  std::pair<std::vector<VolumePair>, std::vector<VolumePair>> out;
  for (const auto& v : data) (train_ids.count(v.ct.subject_id) ? out.first : out.second).push_back(v);
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Subcommands

struct PhantomArgs {
  std::string out;
  int count = 8;
  std::vector<int> shape = {8, 64, 64};
  std::string format = "nii.gz";
};

int cmd_make_phantom(const PhantomArgs& a, const Context& ctx) {
  if (a.shape.size() != 3) throw UsageError("--shape needs three values: slices,height,width");
  auto rng = derive_stream(module_seed(ctx.common, "phantom"), 0);
  const auto data = make_phantom_dataset(a.count, {a.shape[0], a.shape[1], a.shape[2]}, rng);
  const std::string ext = "." + a.format;
  std::vector<std::string> files;
  for (const auto& v : data) {
    files.push_back(v.ct.subject_id + ext);
    files.push_back(v.ct.subject_id + "_label" + ext);
    files.push_back("lobes/" + v.ct.subject_id + ext);
  }
  const fs::path dir(a.out);
  prepare_outputs(dir, files, ctx.common.force);
  fs::create_directories(dir / "lobes");
  for (const auto& v : data) {
    save_ct(dir / (v.ct.subject_id + ext), v.ct);
    save_labels(dir / (v.ct.subject_id + "_label" + ext), v.labels);
    save_labels(dir / "lobes" / (v.ct.subject_id + ext), phantom_lobe_map(v.labels));
  }
  ctx.out << "wrote " << data.size() << " phantom volumes to " << dir.string() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, out;
};

int cmd_train(const TrainArgs& a, const Context& ctx) {
  const nlohmann::json cfg = read_json_file(a.config);
  if (!cfg.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, value] : cfg.items())
    if (key != "model" && key != "train" && key != "split") throw ConfigError("unknown config key '" + key + "'");
  ModelConfig mc = model_config_from_json(sub_json(cfg, "model"));
  TrainConfig tc = train_config_from_json(sub_json(cfg, "train"));
  mc.seed = module_seed(ctx.common, "model");
  tc.seed = module_seed(ctx.common, "train");
  tc.workers = ctx.common.workers;
  mc.validate();
  tc.validate();
  const std::string split_mode = cfg.value("split", std::string("pooled"));

  const fs::path dir(a.out);
  prepare_outputs(dir, {"model.ckpt", "report.json", "split.json", "config.json", "train.log"}, ctx.common.force);
  const auto data = load_dataset_dir(a.data);
  const SplitManifest split = split_for(data, split_mode, module_seed(ctx.common, "split"));
  const auto [train_set, val_set] = apply_split(data, split);

  std::ofstream sidecar(dir / "train.log");
  TrainOptions opts;
  opts.checkpoint_path = dir / "model.ckpt";
  opts.log = [&](const std::string& s) {
    sidecar << s << "\n";
    ctx.log(s);
  };
  const TrainReport report = train(*build_model(mc), train_set, val_set, tc, opts);
  sidecar << "wall_seconds " << report.wall_seconds << "\n";

  nlohmann::ordered_json resolved;
  resolved["model"] = nlohmann::ordered_json::parse(model_config_to_json(mc));
  resolved["train"] = nlohmann::ordered_json::parse(train_config_to_json(tc));
  resolved["split"] = split_mode;
  write_file_atomic(dir / "config.json", resolved.dump(2) + "\n");
  write_file_atomic(dir / "split.json", split.to_json());
  write_file_atomic(dir / "report.json", report.to_json());
  ctx.out << "best epoch " << report.best_epoch << ", validation loss " << report.best_val_loss << "\n";
  return kOk;
}

struct PredictArgs {
  std::string checkpoint, input, out;
};

int cmd_predict(const PredictArgs& a, const Context& ctx) {
  prepare_output_file(a.out, ctx.common.force);
  auto model = load_model(a.checkpoint);
  const LoadedVolume vol = load_volume(a.input);
  const LabelVolume pred = volume_predict(*model, vol.ct);
  save_labels(a.out, pred);
  ctx.out << "wrote " << a.out << "\n";
  return kOk;
}

struct EvaluateArgs {
  std::string pred, gt, out;
};

int cmd_evaluate(const EvaluateArgs& a, const Context& ctx) {
  const fs::path dir(a.out);
  prepare_outputs(dir, {"dice.csv", "errors.csv", "summary.json"}, ctx.common.force);
  auto truth = volumes_in(a.gt, true);
  if (truth.empty()) truth = volumes_in(a.gt, false);
  if (truth.empty()) throw DataError("no ground-truth volumes in " + a.gt);
  const auto preds = volumes_in(a.pred, false);

  std::vector<std::pair<std::string, double>> scores;
  std::vector<std::string> missing;
  std::string errors = "subject_id,fp_rate,fn_rate,lung_agreement\n";
  for (const auto& [id, gt_path] : truth) {
    auto it = preds.find(id);
    if (it == preds.end()) {
      missing.push_back(id);
      ctx.err << "no prediction for " << id << "\n";
      continue;
    }
    const LabelVolume gt = load_label_volume(gt_path);
    const LabelVolume pr = load_label_volume(it->second);
    if (!(gt.dims == pr.dims)) throw ShapeError("prediction for " + id + " has shape " + pr.dims.str());
    const auto gf = findings_mask(gt), pf = findings_mask(pr);
    scores.emplace_back(id, dice(pf, gf));
    errors += id + ",";
    if (gf.count() > 0) {
      const ErrorRates r = error_rates(pf, gf);
      errors += fmt(r.fp_rate) + "," + fmt(r.fn_rate);
    } else {
      errors += "NA,NA";
    }
    errors += "," + fmt(mask_agreement(lung_mask(pr), lung_mask(gt))) + "\n";
  }
  const DiceReport report = DiceReport::from_scores(scores);
  nlohmann::ordered_json summary = nlohmann::ordered_json::parse(report.summary_json());
  summary["missing"] = missing;
  write_file_atomic(dir / "dice.csv", report.to_csv());
  write_file_atomic(dir / "errors.csv", errors);
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  ctx.out << "evaluated " << scores.size() << " volumes, mean Dice " << report.mean << "\n";
  return kOk;
}

struct AblateArgs {
  std::string config, data, out;
};

int cmd_ablate(const AblateArgs& a, const Context& ctx) {
  AblationConfig cfg = ablation_config_from_json(read_json_file(a.config).dump());
  cfg.model.seed = module_seed(ctx.common, "model");
  cfg.train.seed = module_seed(ctx.common, "train");
  cfg.train.workers = ctx.common.workers;
  const fs::path dir(a.out);
  prepare_outputs(dir, {"ablation.csv", "ablation.txt", "ablation.log"}, ctx.common.force);

  std::vector<VolumePair> data;
  if (!a.data.empty()) {
    data = load_dataset_dir(a.data);
  } else {
    auto rng = derive_stream(module_seed(ctx.common, "phantom"), 0);
    data = make_phantom_dataset(cfg.phantom_volumes, cfg.phantom_shape, rng);
  }
  const SplitManifest split = split_for(data, "pooled", module_seed(ctx.common, "split"));
  const auto [train_set, val_set] = apply_split(data, split);

  std::ofstream sidecar(dir / "ablation.log");
  AblationOptions opts;
  opts.log = [&](const std::string& s) {
    sidecar << s << "\n";
    ctx.log(s);
  };
  const AblationTable table = run_ablation_matrix(cfg.resolved(), train_set, val_set, opts);
  write_file_atomic(dir / "ablation.csv", table.to_csv());
  write_file_atomic(dir / "ablation.txt", table.to_text());
  ctx.out << table.to_text();
  return kOk;
}

struct RadiomicsArgs {
  std::string pred, lobes, covariates, out;
};

int cmd_radiomics(const RadiomicsArgs& a, const Context& ctx) {
  const fs::path dir(a.out);
  prepare_outputs(dir, {"poi.csv", "lobar_rows.csv"}, ctx.common.force);
  const auto preds = volumes_in(a.pred, false);
  if (preds.empty()) throw DataError("no label volumes in " + a.pred);
  std::map<std::string, fs::path> lobe_files;
  if (!a.lobes.empty()) lobe_files = volumes_in(a.lobes, false);
  std::map<std::string, PoiRecord> covariates;
  if (!a.covariates.empty())
    for (auto& r : poi_records_from_csv(read_file(a.covariates))) covariates[r.subject_id] = r;

  std::vector<PoiRecord> records;
  for (const auto& [id, path] : preds) {
    const LabelVolume labels = load_label_volume(path);
    labels.validate();
    PoiRecord rec;
    if (auto it = covariates.find(id); it != covariates.end()) rec = it->second;
    rec.subject_id = id;
    const auto lung = lung_mask(labels);
    const auto findings = findings_mask(labels);
    if (auto it = lobe_files.find(id); it != lobe_files.end()) {
      const LabelVolume map = load_label_volume(it->second);
      if (!(map.dims == labels.dims)) throw ShapeError("lobe map for " + id + " has shape " + map.dims.str());
      const LobarPoi lp = lobar_poi(findings, LobeMaskSet::from_label_map(map), lung);
      for (const auto& w : lp.warnings) ctx.err << id << ": " << w << "\n";
      rec.poi_total = lp.total;
      rec.poi_lobes = lp.lobes;
    } else {
      if (!a.lobes.empty()) ctx.err << id << ": no lobe map\n";
      rec.poi_total = poi(findings, lung);
      rec.poi_lobes = {};
    }
    records.push_back(std::move(rec));
  }
  write_file_atomic(dir / "poi.csv", poi_records_to_csv(records));
  write_file_atomic(dir / "lobar_rows.csv", lobar_rows_csv(records));
  ctx.out << "wrote POI for " << records.size() << " subjects\n";
  return kOk;
}

struct CohortArgs {
  std::string input, out;
};

int cmd_cohort_stats(const CohortArgs& a, const Context& ctx) {
  const fs::path dir(a.out);
  prepare_outputs(dir, {"analysis.json", "analysis.txt", "boxplot.csv"}, ctx.common.force);
  const auto records = poi_records_from_csv(read_file(a.input));
  const CohortReport report = cohort_analysis(records);
  for (const auto& id : report.excluded) ctx.err << "excluded incomplete record " << id << "\n";
  write_file_atomic(dir / "analysis.json", report.to_json());
  write_file_atomic(dir / "analysis.txt", report.to_text());
  write_file_atomic(dir / "boxplot.csv", report.boxplot_csv());
  ctx.out << report.to_text();
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lung CT segmentation, ablation and radiomics pipeline", "medseg"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "Root random seed");
    sub->add_option("--workers", common.workers, "Data loading workers")->check(CLI::PositiveNumber);
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
    sub->add_flag("--verbose", common.verbose, "Progress on stderr");
  };

  PhantomArgs phantom;
  auto* s_phantom = app.add_subcommand("make-phantom", "Write a synthetic labelled dataset");
  s_phantom->add_option("--out", phantom.out, "Output directory")->required();
  s_phantom->add_option("--count", phantom.count, "Number of volumes")->check(CLI::PositiveNumber);
  s_phantom->add_option("--shape", phantom.shape, "slices,height,width")->delimiter(',')->expected(3);
  s_phantom->add_option("--format", phantom.format, "nii.gz, nii or json")
      ->check(CLI::IsMember({"nii.gz", "nii", "json"}));
  add_common(s_phantom);

  TrainArgs train_args;
  auto* s_train = app.add_subcommand("train", "Train a model on a labelled dataset");
  s_train->add_option("--config", train_args.config, "Experiment config (JSON)")->required();
  s_train->add_option("--data", train_args.data, "Dataset directory")->required();
  s_train->add_option("--out", train_args.out, "Output directory")->required();
  add_common(s_train);

  PredictArgs predict;
  auto* s_predict = app.add_subcommand("predict", "Segment one CT volume");
  s_predict->add_option("--checkpoint", predict.checkpoint, "Model checkpoint")->required();
  s_predict->add_option("--input", predict.input, "CT volume")->required();
  s_predict->add_option("--out", predict.out, "Output label volume")->required();
  add_common(s_predict);

  EvaluateArgs evaluate;
  auto* s_evaluate = app.add_subcommand("evaluate", "Dice and error rates of predictions");
  s_evaluate->add_option("--pred", evaluate.pred, "Predicted label volumes")->required();
  s_evaluate->add_option("--gt", evaluate.gt, "Ground-truth directory")->required();
  s_evaluate->add_option("--out", evaluate.out, "Output directory")->required();
  add_common(s_evaluate);

  AblateArgs ablate;
  auto* s_ablate = app.add_subcommand("ablate", "Run an ablation matrix");
  s_ablate->add_option("--config", ablate.config, "Ablation config (JSON)")->required();
  s_ablate->add_option("--data", ablate.data, "Dataset directory (phantoms when omitted)");
  s_ablate->add_option("--out", ablate.out, "Output directory")->required();
  add_common(s_ablate);

  RadiomicsArgs radiomics;
  auto* s_radiomics = app.add_subcommand("radiomics", "Percentage of involvement per lung and lobe");
  s_radiomics->add_option("--pred", radiomics.pred, "Label volumes (0/1/2)")->required();
  s_radiomics->add_option("--lobes", radiomics.lobes, "Lobe label maps (1..5) by subject");
  s_radiomics->add_option("--covariates", radiomics.covariates, "CSV with age, sex, days_dx_to_ct, vaccinated");
  s_radiomics->add_option("--out", radiomics.out, "Output directory")->required();
  add_common(s_radiomics);

  CohortArgs cohort;
  auto* s_cohort = app.add_subcommand("cohort-stats", "t-test and regression on POI records");
  s_cohort->add_option("--input", cohort.input, "POI records CSV")->required();
  s_cohort->add_option("--out", cohort.out, "Output directory")->required();
  add_common(s_cohort);

  std::vector<std::string> argv_store{"medseg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  const Context ctx{common, out, err};
  try {
    if (*s_phantom) return cmd_make_phantom(phantom, ctx);
    if (*s_train) return cmd_train(train_args, ctx);
    if (*s_predict) return cmd_predict(predict, ctx);
    if (*s_evaluate) return cmd_evaluate(evaluate, ctx);
    if (*s_ablate) return cmd_ablate(ablate, ctx);
    if (*s_radiomics) return cmd_radiomics(radiomics, ctx);
    if (*s_cohort) return cmd_cohort_stats(cohort, ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}

}  // namespace medseg::cli
