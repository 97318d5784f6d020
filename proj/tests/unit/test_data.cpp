#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "medseg/data.hpp"
#include "medseg/error.hpp"

using namespace medseg;

namespace {

VolumePair ramp_volume(int slices, int h, int w) {
  VolumePair v;
  v.ct.subject_id = "ramp";
  v.ct.dims = {slices, h, w};
  v.ct.hu.resize(v.ct.dims.numel());
  for (int z = 0; z < slices; ++z)
    for (int i = 0; i < h * w; ++i) v.ct.hu[z * h * w + i] = static_cast<float>(1000 * z + i);
  v.labels = {v.ct.dims, v.ct.spacing, std::vector<std::uint8_t>(v.ct.dims.numel(), 0)};
  return v;
}

std::vector<std::string> ids(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("s" + std::to_string(100 + i));
  return out;
}

}  // namespace

TEST(Triplet, NeighbourOrderAndEdgeReplication) {
  const VolumePair v = ramp_volume(4, 2, 3);
  const InputPatch mid = make_triplet(v.ct, 2);
  EXPECT_EQ(mid.height, 2);
  EXPECT_EQ(mid.width, 3);
  EXPECT_EQ(mid.intensities[0], 1000.0);
  EXPECT_EQ(mid.intensities[6], 2000.0);
  EXPECT_EQ(mid.intensities[12], 3000.0);
  const InputPatch first = make_triplet(v.ct, 0);
  EXPECT_EQ(first.intensities[0], 0.0);
  EXPECT_EQ(first.intensities[6], 0.0);
  EXPECT_EQ(first.intensities[12], 1000.0);
  const InputPatch last = make_triplet(v.ct, 3);
  EXPECT_EQ(last.intensities[0], 2000.0);
  EXPECT_EQ(last.intensities[12], 3000.0);
  EXPECT_THROW(make_triplet(v.ct, 4), ShapeError);
}

TEST(SliceSamples, SwaKeepsOnlyAnnotatedSlices) {
  VolumePair v = ramp_volume(5, 4, 4);
  v.labels.labels[1 * 16 + 3] = kLung;
  v.labels.labels[3 * 16 + 0] = kFindings;
  auto shared = std::make_shared<const VolumePair>(v);
  EXPECT_EQ(make_slice_samples(shared, false).size(), 5u);
  const auto swa = make_slice_samples(shared, true);
  ASSERT_EQ(swa.size(), 2u);
  EXPECT_EQ(swa[0].index, 1);
  EXPECT_EQ(swa[1].index, 3);
  EXPECT_TRUE(swa[0].has_annotation);
  EXPECT_EQ(swa[1].target()[0], kFindings);
}

TEST(VolumePair, RejectsLabelShapeMismatch) {
  VolumePair v = ramp_volume(3, 4, 4);
  v.labels.dims = {3, 4, 5};
  v.labels.labels.resize(60);
  EXPECT_THROW(v.validate(), ShapeError);
}

TEST(Patches, CropAgreesWithSourceAndStaysInBounds) {
  VolumePair v = ramp_volume(3, 16, 12);
  for (std::size_t i = 0; i < v.labels.labels.size(); ++i) v.labels.labels[i] = static_cast<std::uint8_t>(i % 3);
  auto shared = std::make_shared<const VolumePair>(v);
  const auto samples = make_slice_samples(shared, false);
  std::mt19937_64 rng(1);
  std::set<std::pair<int, int>> corners;
  for (int t = 0; t < 400; ++t) {
    const PatchSample p = sample_patch(samples[1], 8, rng);
    ASSERT_GE(p.top, 0);
    ASSERT_LE(p.top, 8);
    ASSERT_GE(p.left, 0);
    ASSERT_LE(p.left, 4);
    corners.insert({p.top, p.left});
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const int src = (p.top + y) * 12 + p.left + x;
        ASSERT_EQ(p.image.intensities[64 + y * 8 + x], 1000.0 + src);
        ASSERT_EQ(p.target[y * 8 + x], v.labels.labels[16 * 12 + src]);
      }
  }
  EXPECT_EQ(corners.size(), 9u * 5u);  // every corner reachable
  EXPECT_THROW(sample_patch(samples[0], 13, rng), ShapeError);
}

TEST(Patches, ResultIndependentOfWorkerCount) {
  auto shared = std::make_shared<const VolumePair>(ramp_volume(6, 16, 16));
  const auto samples = make_slice_samples(shared, false);
  const std::vector<std::size_t> idx = {5, 0, 3, 3, 1};
  const auto a = sample_patches(samples, idx, 8, 77, 1);
  const auto b = sample_patches(samples, idx, 8, 77, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].top, b[i].top);
    EXPECT_EQ(a[i].left, b[i].left);
    EXPECT_EQ(a[i].image.intensities, b[i].image.intensities);
  }
}

TEST(UniformBelow, StaysInRangeAndCoversIt) {
  std::mt19937_64 rng(2);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[uniform_below(rng, 7)];
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Split, DeterministicDisjointAndEightyPercent) {
  const auto a = split_subjects(ids(10), 5);
  const auto b = split_subjects(ids(10), 5);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.val_ids, b.val_ids);
  EXPECT_EQ(a.train_ids.size(), 8u);
  EXPECT_EQ(a.val_ids.size(), 2u);
  std::set<std::string> all(a.train_ids.begin(), a.train_ids.end());
  for (const auto& id : a.val_ids) EXPECT_TRUE(all.insert(id).second);
  EXPECT_EQ(all.size(), 10u);
  // Input order does not matter.
  auto shuffled = ids(10);
  std::reverse(shuffled.begin(), shuffled.end());
  EXPECT_EQ(split_subjects(shuffled, 5).val_ids, a.val_ids);
}

TEST(Split, EdgeCases) {
  EXPECT_THROW(split_subjects({"only"}, 1), ConfigError);
  EXPECT_THROW(split_subjects({"a", "a", "b"}, 1), ConfigError);
  const auto two = split_subjects({"a", "b"}, 1);
  EXPECT_EQ(two.train_ids.size(), 1u);
  EXPECT_EQ(two.val_ids.size(), 1u);
  const auto m = SplitManifest::from_json(two.to_json());
  EXPECT_EQ(m.train_ids, two.train_ids);
  EXPECT_EQ(m.val_ids, two.val_ids);
}

TEST(Split, PerGroupSplitsEachGroup) {
  std::map<std::string, std::vector<std::string>> groups = {{"A", ids(5)}, {"B", {"b1", "b2", "b3", "b4", "b5"}}};
  const auto m = split_subjects_per_group(groups, 3);
  EXPECT_EQ(m.train_ids.size(), 8u);
  EXPECT_EQ(m.val_ids.size(), 2u);
  int val_b = 0;
  for (const auto& id : m.val_ids) val_b += id[0] == 'b';
  EXPECT_EQ(val_b, 1);
}

TEST(Split, KFoldCoversEverySubjectOnce) {
  const auto folds = kfold_subjects(ids(11), 5, 9);
  ASSERT_EQ(folds.size(), 5u);
  std::multiset<std::string> seen;
  for (const auto& f : folds) {
    EXPECT_GE(f.size(), 2u);
    seen.insert(f.begin(), f.end());
  }
  EXPECT_EQ(seen.size(), 11u);
  EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), 11u);
}

TEST(Phantom, StructureMatchesDescription) {
  std::mt19937_64 rng(11);
  const auto data = make_phantom_dataset(3, {8, 64, 64}, rng);
  ASSERT_EQ(data.size(), 3u);
  EXPECT_EQ(data[0].ct.subject_id, "phantom_000");
  for (const auto& v : data) {
    EXPECT_NO_THROW(v.validate());
    std::size_t lung = 0, findings = 0;
    double lung_hu = 0, finding_hu = 0;
    for (std::size_t i = 0; i < v.labels.labels.size(); ++i) {
      if (v.labels.labels[i] == kLung) {
        ++lung;
        lung_hu += v.ct.hu[i];
      } else if (v.labels.labels[i] == kFindings) {
        ++findings;
        finding_hu += v.ct.hu[i];
      }
    }
    EXPECT_GT(lung, 1000u);
    EXPECT_GT(findings, 10u);
    EXPECT_NEAR(lung_hu / lung, -800.0, 5.0);
    EXPECT_NEAR(finding_hu / findings, -100.0, 10.0);
  }
  std::mt19937_64 rng2(11);
  const auto again = make_phantom_dataset(3, {8, 64, 64}, rng2);
  EXPECT_EQ(again[2].ct.hu, data[2].ct.hu);
  EXPECT_THROW(make_phantom_dataset(1, {4, 64, 64}, rng), ConfigError);
}

TEST(Phantom, LobeMapPartitionsTheLung) {
  std::mt19937_64 rng(12);
  const auto v = make_phantom_dataset(1, {8, 64, 64}, rng).front();
  const LabelVolume lobes = phantom_lobe_map(v.labels);
  std::vector<std::size_t> counts(6, 0);
  for (std::size_t i = 0; i < lobes.labels.size(); ++i) {
    const bool in_lung = v.labels.labels[i] >= kLung;
    EXPECT_EQ(lobes.labels[i] > 0, in_lung);
    ++counts[lobes.labels[i]];
  }
  for (int k = 1; k <= 5; ++k) EXPECT_GT(counts[k], 0u) << "lobe " << k;
}
