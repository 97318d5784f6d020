#pragma once

// Volumetric containers. Arrays are stored slice-major: index
// (z * height + y) * width + x, which is also NIfTI's x-fastest order.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace medseg {

struct Dims3 {
  int slices = 0;
  int height = 0;
  int width = 0;

  std::size_t numel() const { return static_cast<std::size_t>(slices) * height * width; }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * height + y) * width + x;
  }
  bool operator==(const Dims3&) const = default;
  std::string str() const;
};

/// Voxel spacing in millimetres.
struct Spacing {
  double dz = 1.0;
  double dy = 1.0;
  double dx = 1.0;
  bool operator==(const Spacing&) const = default;
};

enum Label : std::uint8_t { kBackground = 0, kLung = 1, kFindings = 2 };

struct CtVolume {
  std::string subject_id;
  Dims3 dims;
  Spacing spacing;
  std::vector<float> hu;

  float at(int z, int y, int x) const { return hu[dims.index(z, y, x)]; }
  void validate() const;
};

struct LabelVolume {
  Dims3 dims;
  Spacing spacing;
  std::vector<std::uint8_t> labels;

  std::uint8_t at(int z, int y, int x) const { return labels[dims.index(z, y, x)]; }
  void validate() const;
};

struct BinaryMask3D {
  Dims3 dims;
  Spacing spacing;
  std::vector<std::uint8_t> voxels;  // 0 or 1

  std::size_t count() const;
};

/// Voxels labelled lung or findings (findings are part of the lung).
BinaryMask3D lung_mask(const LabelVolume& labels);
BinaryMask3D findings_mask(const LabelVolume& labels);
/// Voxels whose label equals `value` (e.g. one lobe of a lobe label map).
BinaryMask3D mask_from_labels(const LabelVolume& labels, std::uint8_t value);

// ---------------------------------------------------------------------------
// On-disk formats: NIfTI-1 (.nii, .nii.gz) and the raw fallback
// (<name>.json header + <name>.bin little-endian array).

enum class VoxelType { uint8, int16, int32, float32, float64 };

struct LoadedVolume {
  CtVolume ct;
  std::optional<LabelVolume> labels;
};

/// Sibling label path: "<stem>_label<ext>" next to the image.
std::filesystem::path label_path_for(const std::filesystem::path& image);
/// Subject id derived from a file name (extension(s) stripped).
std::string subject_id_from_path(const std::filesystem::path& p);
bool is_volume_file(const std::filesystem::path& p);

/// Loads an image and, when present, its sibling label volume.
/// Throws IoError (unreadable), FormatError (malformed) or ShapeError
/// (label shape differs from the image).
LoadedVolume load_volume(const std::filesystem::path& path);
LabelVolume load_label_volume(const std::filesystem::path& path);

void save_ct(const std::filesystem::path& path, const CtVolume& ct);
void save_labels(const std::filesystem::path& path, const LabelVolume& labels);

}  // namespace medseg
