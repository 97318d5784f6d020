#pragma once

#include <filesystem>
#include <vector>

#include "medseg/volume.hpp"

namespace medseg::nifti {

struct Image {
  Dims3 dims;
  Spacing spacing;
  std::vector<double> values;  // scaled by scl_slope / scl_inter when set
};

/// Reads a single-file NIfTI-1 image (.nii or gzip-compressed .nii.gz).
/// Only 3D scalar volumes are accepted; a 4th dimension of size 1 is allowed.
Image read(const std::filesystem::path& path);

/// Writes a NIfTI-1 image; gzip compression when the name ends in ".gz".
void write(const std::filesystem::path& path, const Dims3& dims, const Spacing& spacing,
           const std::vector<double>& values, VoxelType type);

}  // namespace medseg::nifti
