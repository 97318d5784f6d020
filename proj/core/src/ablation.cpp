#include "medseg/ablation.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <sstream>

#include "medseg/error.hpp"

namespace medseg {

const std::vector<std::string>& AblationFlags::names() {
  static const std::vector<std::string> n = {"ESC", "IPS", "IBS", "SWA", "WLRD", "CNF", "UPS", "AW"};
  return n;
}

namespace {

std::vector<bool*> fields(AblationFlags& f) { return {&f.esc, &f.ips, &f.ibs, &f.swa, &f.wlrd, &f.cnf, &f.ups, &f.aw}; }

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10f", v);
  return buf;
}

}  // namespace

AblationFlags AblationFlags::from_names(const std::vector<std::string>& list) {
  AblationFlags f;
  auto ptrs = fields(f);
  for (const auto& raw : list) {
    const std::string n = upper(raw);
    auto it = std::find(names().begin(), names().end(), n);
    if (it == names().end()) throw ConfigError("unknown ablation flag '" + raw + "'");
    *ptrs[static_cast<std::size_t>(it - names().begin())] = true;
  }
  return f;
}

std::vector<std::string> AblationFlags::to_names() const {
  AblationFlags copy = *this;
  auto ptrs = fields(copy);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ptrs.size(); ++i)
    if (*ptrs[i]) out.push_back(names()[i]);
  return out;
}

std::string AblationFlags::label() const {
  const auto n = to_names();
  if (n.empty()) return "none";
  std::string out;
  for (const auto& s : n) out += (out.empty() ? "" : "+") + s;
  return out;
}

std::vector<AblationFlags> standard_ablation_rows() {
  const std::vector<std::vector<std::string>> rows = {
      {},
      {"WLRD"},
      {"IPS", "SWA", "WLRD", "CNF", "AW"},
      {"IPS"},
      {"IPS", "SWA"},
      {"IPS", "SWA", "WLRD", "AW"},
      {"IPS", "SWA"},
      {"IPS", "SWA", "WLRD"},
      {"IPS", "SWA", "WLRD", "AW"},
      {"IPS", "SWA", "WLRD", "UPS", "AW"},
      {"IPS", "IBS", "SWA", "WLRD", "UPS", "AW"},
      {"ESC", "IPS", "IBS", "SWA", "WLRD", "UPS", "AW"},
  };
  std::vector<AblationFlags> out;
  for (const auto& r : rows) out.push_back(AblationFlags::from_names(r));
  return out;
}

AblationRow resolve_row(const AblationFlags& flags, const ModelConfig& base_model, const TrainConfig& base_train,
                        const AblationScale& scale) {
  AblationRow row{flags, base_model, base_train};
  row.model.use_esc = flags.esc;
  row.model.use_bilinear_upsample = flags.ups;
  row.model.backbone = flags.cnf ? Backbone::convnext_style : Backbone::efficientnet_style;
  row.train.patch_size = flags.ips ? scale.increased_patch : scale.base_patch;
  row.model.patch_size = row.train.patch_size;
  row.train.batch_size = flags.ibs ? scale.increased_batch : scale.base_batch;
  row.train.swa = flags.swa;
  row.train.weight_decay = flags.wlrd ? 1e-5 : 0.0;
  row.train.lr_decay_gamma = flags.wlrd ? 0.985 : 1.0;
  row.train.optimizer = flags.aw ? OptimizerKind::adamw : OptimizerKind::adam;
  return row;
}

std::vector<AblationRow> AblationConfig::resolved() const {
  std::vector<AblationRow> out;
  for (const auto& f : rows) out.push_back(resolve_row(f, model, train, scale));
  return out;
}

AblationConfig ablation_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("ablation config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (key != "model" && key != "train" && key != "scale" && key != "rows" && key != "phantom")
      throw ConfigError("ablation config: unknown key '" + key + "'");
  AblationConfig c;
  try {
    if (j.contains("model")) c.model = model_config_from_json(j.at("model").dump());
    if (j.contains("train")) c.train = train_config_from_json(j.at("train").dump());
    if (j.contains("scale")) {
      const auto& s = j.at("scale");
      c.scale.base_patch = s.value("base_patch", c.scale.base_patch);
      c.scale.increased_patch = s.value("increased_patch", c.scale.increased_patch);
      c.scale.base_batch = s.value("base_batch", c.scale.base_batch);
      c.scale.increased_batch = s.value("increased_batch", c.scale.increased_batch);
    }
    if (!j.contains("rows")) throw ConfigError("ablation config needs a 'rows' entry");
    const auto& rows = j.at("rows");
    if (rows.is_string()) {
      if (rows.get<std::string>() != "standard") throw ConfigError("rows must be \"standard\" or a list of flag lists");
      c.rows = standard_ablation_rows();
    } else {
      for (const auto& r : rows) c.rows.push_back(AblationFlags::from_names(r.get<std::vector<std::string>>()));
    }
    if (c.rows.empty()) throw ConfigError("ablation config has no rows");
    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      c.phantom_volumes = p.value("volumes", c.phantom_volumes);
      if (p.contains("shape")) {
        const auto s = p.at("shape").get<std::vector<int>>();
        if (s.size() != 3) throw ConfigError("phantom shape needs three entries");
        c.phantom_shape = {s[0], s[1], s[2]};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  for (const auto& r : c.resolved()) {
    r.model.validate();
    r.train.validate();
  }
  return c;
}

// ---------------------------------------------------------------------------

DiceReport evaluate_findings(SegModel& model, const std::vector<VolumePair>& volumes) {
  std::vector<std::pair<std::string, double>> scores;
  for (const auto& v : volumes) {
    const LabelVolume pred = volume_predict(model, v.ct);
    scores.emplace_back(v.ct.subject_id, dice(findings_mask(pred), findings_mask(v.labels)));
  }
  return DiceReport::from_scores(std::move(scores));
}

AblationTable run_ablation_matrix(const std::vector<AblationRow>& rows, const std::vector<VolumePair>& train_set,
                                  const std::vector<VolumePair>& val_set, const AblationOptions& options) {
  AblationTable table;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const AblationRow& row = rows[i];
    AblationRowResult result{row.flags, std::nullopt, std::nullopt, ""};
    if (options.log) options.log("row " + std::to_string(i + 1) + " [" + row.flags.label() + "]");
    try {
      auto model = build_model(row.model);
      TrainOptions to;
      to.log = options.log;
      train(*model, train_set, val_set, row.train, to);
      result.dice = evaluate_findings(*model, val_set);
    } catch (const std::exception& e) {
      result.error = e.what();
      if (options.log) options.log("row " + std::to_string(i + 1) + " failed: " + result.error);
    }
    table.rows.push_back(std::move(result));
  }
  if (!table.rows.empty() && table.rows.front().dice) {
    const DiceReport& base = *table.rows.front().dice;
    for (std::size_t i = 1; i < table.rows.size(); ++i)
      if (table.rows[i].dice) table.rows[i].p_vs_baseline = compare_runs(*table.rows[i].dice, base);
  }
  return table;
}

std::string AblationTable::to_csv() const {
  std::string out = "row,flags,dice_mean,dice_std,p_vs_baseline\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out += std::to_string(i + 1) + "," + r.flags.label() + ",";
    out += r.dice ? fmt(r.dice->mean) + "," + fmt(r.dice->std) : std::string("NA,NA");
    out += "," + (r.p_vs_baseline ? fmt(*r.p_vs_baseline) : std::string("NA")) + "\n";
  }
  return out;
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << "row";
  for (const auto& n : AblationFlags::names()) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), " %5s", n.c_str());
    os << buf;
  }
  os << "  dice (mean +- std)       p vs row 1\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%3zu", i + 1);
    os << buf;
    AblationFlags f = r.flags;
    for (bool* b : fields(f)) os << (*b ? "     x" : "      ");
    if (r.dice) {
      std::snprintf(buf, sizeof(buf), "  %.4f +- %.4f", r.dice->mean, r.dice->std);
      os << buf;
      if (r.p_vs_baseline) {
        std::snprintf(buf, sizeof(buf), "         %.4g", *r.p_vs_baseline);
        os << buf;
      }
    } else {
      os << "  failed: " << r.error;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace medseg
