#pragma once

// 2.5D sample assembly, random patch extraction, subject-level splits and
// the synthetic phantom generator used for desk-scale training.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "medseg/model.hpp"
#include "medseg/volume.hpp"

namespace medseg {

struct VolumePair {
  CtVolume ct;
  LabelVolume labels;

  /// Throws ShapeError when the label shape differs from the image.
  void validate() const;
};

/// Axial triplet (i-1, i, i+1) with edge replication at the volume ends.
InputPatch make_triplet(const CtVolume& ct, int index);

/// One axial slice of a labelled volume. The volume is shared, not copied.
struct SliceSample {
  std::shared_ptr<const VolumePair> source;
  int index = 0;
  bool has_annotation = false;  // any voxel of slice `index` labelled >= 1

  InputPatch triplet() const { return make_triplet(source->ct, index); }
  std::vector<std::uint8_t> target() const;
  int height() const { return source->ct.dims.height; }
  int width() const { return source->ct.dims.width; }
};

/// One sample per axial slice; with `swa` only annotated slices are kept.
std::vector<SliceSample> make_slice_samples(const std::shared_ptr<const VolumePair>& volume, bool swa);

struct PatchSample {
  InputPatch image;
  std::vector<std::uint8_t> target;  // label slice cropped like the image
  int top = 0;
  int left = 0;
};

/// Uniformly random square crop of a slice; image and target share the corner.
PatchSample sample_patch(const SliceSample& sample, int patch_size, std::mt19937_64& rng);

/// Independent random stream for (seed, index); used per worker and per sample.
std::mt19937_64 derive_stream(std::uint64_t seed, std::uint64_t index);

/// Draws one patch per listed sample. Sample i uses derive_stream(seed, i), so
/// the result does not depend on `workers`.
std::vector<PatchSample> sample_patches(const std::vector<SliceSample>& samples,
                                        const std::vector<std::size_t>& indices, int patch_size,
                                        std::uint64_t seed, int workers = 1);

/// Uniform integer in [0, bound) from a 64-bit engine (portable across
/// standard library implementations).
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound);

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_below(rng, i)]);
}

struct SplitManifest {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static SplitManifest from_json(const std::string& text);
};

/// Deterministic shuffled 80/20 split by subject; at least one subject lands
/// on each side. Throws ConfigError with fewer than two subjects.
SplitManifest split_subjects(std::vector<std::string> ids, std::uint64_t seed);

/// Splits each group (e.g. source dataset) separately and concatenates.
SplitManifest split_subjects_per_group(const std::map<std::string, std::vector<std::string>>& groups,
                                       std::uint64_t seed);

/// k disjoint validation folds covering every subject.
std::vector<std::vector<std::string>> kfold_subjects(std::vector<std::string> ids, int k,
                                                     std::uint64_t seed);

/// Synthetic chest phantoms: body at ~0 HU, two lung ellipsoids at ~-800 HU
/// (label 1) and findings blobs at ~-100 HU (label 2) strictly inside the lungs.
/// Requires shape >= (8, 64, 64).
std::vector<VolumePair> make_phantom_dataset(int n_volumes, const Dims3& shape, std::mt19937_64& rng);

/// Lobe label map (1 LUL, 2 LLL, 3 RUL, 4 RML, 5 RLL) for a phantom lung:
/// the image-left lung is the patient's right, upper lobes are superior
/// (higher slice index).
LabelVolume phantom_lobe_map(const LabelVolume& labels);

/// Loads every labelled volume in a directory, sorted by subject id.
std::vector<VolumePair> load_dataset_dir(const std::filesystem::path& dir);

}  // namespace medseg
