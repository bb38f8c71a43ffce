#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) reading and writing.
//
// Voxel data is decoded to double after applying scl_slope / scl_inter and
// stored in the canonical order of volume.hpp (z fastest); files keep x
// fastest, so reads and writes transpose.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cotseg/volume.hpp"

namespace cotseg {

enum class NiftiType : std::int16_t {
    UInt8 = 2,
    Int16 = 4,
    Int32 = 8,
    Float32 = 16,
    Float64 = 64,
    Int8 = 256,
    UInt16 = 512,
    UInt32 = 768,
};

bool nifti_type_supported(int code);
std::size_t nifti_type_size(NiftiType t);
std::string nifti_type_name(NiftiType t);

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiDataOffset = 352;

struct NiftiVolume {
    Dims3 dims{1, 1, 1};
    NiftiType dtype = NiftiType::Float32;
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<double> data;
    /// Raw header as read (little-endian files only); written back with the
    /// layout fields overwritten. Empty for volumes built in memory.
    std::vector<std::uint8_t> header;
};

/// Parses an in-memory file image, gzip or plain. Throws NiftiError whose
/// field() is one of "sizeof_hdr", "magic", "datatype", "dim", "vox_offset",
/// "truncated" or "gzip".
NiftiVolume parse_nifti(const std::vector<std::uint8_t>& bytes);
NiftiVolume read_nifti(const std::filesystem::path& path);

/// Serialises to an uncompressed NIfTI-1 image. Throws ParameterError if a
/// value cannot be stored exactly in vol.dtype.
std::vector<std::uint8_t> encode_nifti(const NiftiVolume& vol);
/// Writes gzip-compressed when the path ends in ".gz". Throws Error on I/O
/// failure.
void write_nifti(const NiftiVolume& vol, const std::filesystem::path& path);

/// Deterministic gzip (mtime 0) and the matching inflate.
std::vector<std::uint8_t> gzip_compress(const std::vector<std::uint8_t>& raw);
std::vector<std::uint8_t> gzip_decompress(const std::vector<std::uint8_t>& gz);

/// Label volumes: values must be in {0,1,2,4} (ValidationError otherwise).
LabelMask to_label_mask(const NiftiVolume& vol);
NiftiVolume from_label_mask(const LabelMask& mask);

}  // namespace cotseg
