#include <gtest/gtest.h>

#include "medseg/ablation.hpp"
#include "medseg/error.hpp"
#include "test_util.hpp"

using namespace medseg;
using medseg::testing::micro_config;

namespace {

AblationScale toy_scale() { return {32, 64, 2, 4}; }

TrainConfig toy_train() {
  TrainConfig c;
  c.initial_lr = 1e-3;
  c.max_epochs = 1;
  c.max_steps = 2;
  c.seed = 17;
  return c;
}

}  // namespace

TEST(AblationFlags, NamesRoundTripAndLabels) {
  const auto f = AblationFlags::from_names({"esc", "IPS", "Aw"});
  EXPECT_TRUE(f.esc && f.ips && f.aw);
  EXPECT_FALSE(f.ibs || f.swa || f.wlrd || f.cnf || f.ups);
  EXPECT_EQ(f.label(), "ESC+IPS+AW");
  EXPECT_EQ(AblationFlags::from_names(f.to_names()), f);
  EXPECT_EQ(AblationFlags{}.label(), "none");
  EXPECT_THROW(AblationFlags::from_names({"DROPOUT"}), ConfigError);
}

TEST(StandardRows, TwelveRowsBaselineFirstProposedLast) {
  const auto rows = standard_ablation_rows();
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows.front(), AblationFlags{});
  EXPECT_EQ(rows.back().label(), "ESC+IPS+IBS+SWA+WLRD+UPS+AW");
  EXPECT_TRUE(rows[2].cnf);
  int with_esc = 0, with_cnf = 0;
  for (const auto& r : rows) {
    with_esc += r.esc;
    with_cnf += r.cnf;
  }
  EXPECT_EQ(with_esc, 1);
  EXPECT_EQ(with_cnf, 1);
}

TEST(ResolveRow, FlagsOwnTheFieldsTheyControl) {
  ModelConfig m = micro_config();
  m.use_esc = true;
  m.use_bilinear_upsample = true;
  TrainConfig t;
  t.optimizer = OptimizerKind::adamw;
  t.weight_decay = 0.1;
  const AblationRow base = resolve_row({}, m, t);
  EXPECT_FALSE(base.model.use_esc);
  EXPECT_FALSE(base.model.use_bilinear_upsample);
  EXPECT_EQ(base.model.backbone, Backbone::efficientnet_style);
  EXPECT_EQ(base.train.optimizer, OptimizerKind::adam);
  EXPECT_EQ(base.train.weight_decay, 0.0);
  EXPECT_EQ(base.train.lr_decay_gamma, 1.0);
  EXPECT_EQ(base.train.patch_size, 128);
  EXPECT_EQ(base.train.batch_size, 30);

  const AblationRow full = resolve_row(standard_ablation_rows().back(), m, t);
  EXPECT_TRUE(full.model.use_esc);
  EXPECT_EQ(full.model.patch_size, 256);
  EXPECT_EQ(full.train.patch_size, 256);
  EXPECT_EQ(full.train.batch_size, 60);
  EXPECT_TRUE(full.train.swa);
  EXPECT_EQ(full.train.weight_decay, 1e-5);
  EXPECT_EQ(full.train.lr_decay_gamma, 0.985);
  EXPECT_EQ(full.train.optimizer, OptimizerKind::adamw);
  EXPECT_EQ(full.train.initial_lr, t.initial_lr);
}

TEST(AblationConfig, ParsesStandardAndExplicitRows) {
  const auto a = ablation_config_from_json(R"({"rows": "standard", "phantom": {"volumes": 4, "shape": [8, 64, 96]}})");
  EXPECT_EQ(a.rows, standard_ablation_rows());
  EXPECT_EQ(a.phantom_volumes, 4);
  EXPECT_EQ(a.phantom_shape, (Dims3{8, 64, 96}));
  const auto b = ablation_config_from_json(R"({"rows": [[], ["esc", "ups"]], "scale": {"base_patch": 64}})");
  ASSERT_EQ(b.rows.size(), 2u);
  EXPECT_TRUE(b.rows[1].esc && b.rows[1].ups);
  EXPECT_EQ(b.resolved()[0].train.patch_size, 64);
  EXPECT_THROW(ablation_config_from_json(R"({"rows": "table2"})"), ConfigError);
  EXPECT_THROW(ablation_config_from_json(R"({"rows": [["ESC", "XYZ"]]})"), ConfigError);
  EXPECT_THROW(ablation_config_from_json(R"({})"), ConfigError);
  EXPECT_THROW(ablation_config_from_json(R"({"rows": [[]], "scale": {"base_patch": 50}})"), ConfigError);
}

TEST(AblationMatrix, FailedRowIsRecordedAndOthersRun) {
  std::mt19937_64 rng(31);
  const auto data = make_phantom_dataset(3, {8, 64, 64}, rng);
  AblationScale scale = toy_scale();
  scale.increased_patch = 128;  // larger than a phantom slice
  std::vector<AblationRow> rows;
  for (const auto& f : {AblationFlags{}, AblationFlags::from_names({"IPS"}), AblationFlags::from_names({"ESC"})})
    rows.push_back(resolve_row(f, micro_config(2, 8, 32), toy_train(), scale));
  const AblationTable t = run_ablation_matrix(rows, {data[0], data[1]}, {data[2]});
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_TRUE(t.rows[0].dice.has_value());
  EXPECT_FALSE(t.rows[1].dice.has_value());
  EXPECT_FALSE(t.rows[1].error.empty());
  EXPECT_TRUE(t.rows[2].dice.has_value());
  EXPECT_TRUE(t.rows[2].p_vs_baseline.has_value());
  const std::string csv = t.to_csv();
  EXPECT_EQ(csv.rfind("row,flags,dice_mean,dice_std,p_vs_baseline\n", 0), 0u);
  EXPECT_NE(csv.find("2,IPS,NA,NA,NA"), std::string::npos);
}

TEST(AblationMatrix, RerunIsIdentical) {
  std::mt19937_64 rng(32);
  const auto data = make_phantom_dataset(3, {8, 64, 64}, rng);
  std::vector<AblationRow> rows;
  for (const auto& f : {AblationFlags{}, AblationFlags::from_names({"ESC", "UPS"})})
    rows.push_back(resolve_row(f, micro_config(2, 8, 32), toy_train(), toy_scale()));
  const auto a = run_ablation_matrix(rows, {data[0], data[1]}, {data[2]}).to_csv();
  const auto b = run_ablation_matrix(rows, {data[0], data[1]}, {data[2]}).to_csv();
  EXPECT_EQ(a, b);
}
