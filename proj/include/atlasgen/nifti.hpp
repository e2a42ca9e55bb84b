#pragma once

#include <string>

#include "atlasgen/tensor.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace dataio {

// Minimal NIfTI-1 support: single-file .nii / .nii.gz, little-endian, dtypes
// uint8 / int16 / int32 / float32 / float64. Vector-valued images use the
// 5th dimension (dim[5] = 3), matching the component-first flow layout.
struct NiftiVolume {
    Tensor data; // [D,H,W] (scalar) or [C,D,H,W] (vector)
    voxelcore::VolumeMeta meta;
};

NiftiVolume read_nifti(const std::string& path);

enum class NiftiDtype { U8, I16, F32, F64 };

void write_nifti(const std::string& path, const Tensor& data, const voxelcore::VolumeMeta& meta,
                 NiftiDtype dtype);

} // namespace dataio
} // namespace atlasgen
