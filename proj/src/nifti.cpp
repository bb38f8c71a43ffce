#include "cotseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <type_traits>

#include "cotseg/errors.hpp"

namespace cotseg {

bool nifti_type_supported(int code) {
    switch (code) {
        case 2: case 4: case 8: case 16: case 64: case 256: case 512: case 768: return true;
        default: return false;
    }
}

std::size_t nifti_type_size(NiftiType t) {
    switch (t) {
        case NiftiType::UInt8: case NiftiType::Int8: return 1;
        case NiftiType::Int16: case NiftiType::UInt16: return 2;
        case NiftiType::Int32: case NiftiType::UInt32: case NiftiType::Float32: return 4;
        case NiftiType::Float64: return 8;
    }
    return 0;
}

std::string nifti_type_name(NiftiType t) {
    switch (t) {
        case NiftiType::UInt8: return "uint8";
        case NiftiType::Int16: return "int16";
        case NiftiType::Int32: return "int32";
        case NiftiType::Float32: return "float32";
        case NiftiType::Float64: return "float64";
        case NiftiType::Int8: return "int8";
        case NiftiType::UInt16: return "uint16";
        case NiftiType::UInt32: return "uint32";
    }
    return "unknown";
}

namespace {

// Header field offsets.
constexpr std::size_t kSizeofHdr = 0, kDim = 40, kDatatype = 70, kBitpix = 72, kPixdim = 76, kVoxOffset = 108,
                      kSclSlope = 112, kSclInter = 116, kXyztUnits = 123, kQformCode = 252, kSformCode = 254,
                      kMagic = 344;

class Reader {
public:
    Reader(const std::uint8_t* p, bool swap) : p_(p), swap_(swap) {}
    template <class T>
    T get(std::size_t off) const {
        std::array<std::uint8_t, sizeof(T)> b;
        std::memcpy(b.data(), p_ + off, sizeof(T));
        if (swap_) std::reverse(b.begin(), b.end());
        T v;
        std::memcpy(&v, b.data(), sizeof(T));
        return v;
    }

private:
    const std::uint8_t* p_;
    bool swap_;
};

template <class T>
void put(std::vector<std::uint8_t>& buf, std::size_t off, T v) {
    static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
    std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <class T>
double decode_one(const Reader& r, std::size_t off) {
    return static_cast<double>(r.get<T>(off));
}

double decode_value(NiftiType t, const Reader& r, std::size_t off) {
    switch (t) {
        case NiftiType::UInt8: return decode_one<std::uint8_t>(r, off);
        case NiftiType::Int8: return decode_one<std::int8_t>(r, off);
        case NiftiType::Int16: return decode_one<std::int16_t>(r, off);
        case NiftiType::UInt16: return decode_one<std::uint16_t>(r, off);
        case NiftiType::Int32: return decode_one<std::int32_t>(r, off);
        case NiftiType::UInt32: return decode_one<std::uint32_t>(r, off);
        case NiftiType::Float32: return decode_one<float>(r, off);
        case NiftiType::Float64: return decode_one<double>(r, off);
    }
    return 0.0;
}

template <class T>
void encode_one(std::vector<std::uint8_t>& buf, std::size_t off, double v) {
    T stored;
    if constexpr (std::is_integral_v<T>) {
        if (!(v >= static_cast<double>(std::numeric_limits<T>::min()) &&
              v <= static_cast<double>(std::numeric_limits<T>::max())) ||
            std::floor(v) != v)
            throw ParameterError("nifti: value " + std::to_string(v) + " is not representable in the volume dtype");
        stored = static_cast<T>(v);
    } else {
        stored = static_cast<T>(v);
        if (std::isfinite(v) && static_cast<double>(stored) != v)
            throw ParameterError("nifti: value " + std::to_string(v) + " is not representable in the volume dtype");
    }
    put(buf, off, stored);
}

void encode_value(NiftiType t, std::vector<std::uint8_t>& buf, std::size_t off, double v) {
    switch (t) {
        case NiftiType::UInt8: return encode_one<std::uint8_t>(buf, off, v);
        case NiftiType::Int8: return encode_one<std::int8_t>(buf, off, v);
        case NiftiType::Int16: return encode_one<std::int16_t>(buf, off, v);
        case NiftiType::UInt16: return encode_one<std::uint16_t>(buf, off, v);
        case NiftiType::Int32: return encode_one<std::int32_t>(buf, off, v);
        case NiftiType::UInt32: return encode_one<std::uint32_t>(buf, off, v);
        case NiftiType::Float32: return encode_one<float>(buf, off, v);
        case NiftiType::Float64: return encode_one<double>(buf, off, v);
    }
}

bool is_gzip(const std::vector<std::uint8_t>& b) { return b.size() >= 2 && b[0] == 0x1F && b[1] == 0x8B; }

}  // namespace

std::vector<std::uint8_t> gzip_compress(const std::vector<std::uint8_t>& raw) {
    z_stream zs{};
    // windowBits 15 + 16 selects the gzip wrapper; zlib writes mtime 0.
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw Error("gzip: deflateInit2 failed");
    std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(raw.size())) + 32);
    zs.next_in = const_cast<Bytef*>(raw.data());
    zs.avail_in = static_cast<uInt>(raw.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    const std::size_t produced = zs.total_out;
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw Error("gzip: deflate failed");
    out.resize(produced);
    return out;
}

std::vector<std::uint8_t> gzip_decompress(const std::vector<std::uint8_t>& gz) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 32) != Z_OK) throw NiftiError("gzip", "inflateInit2 failed");
    std::vector<std::uint8_t> out;
    std::array<std::uint8_t, 1 << 16> chunk;
    zs.next_in = const_cast<Bytef*>(gz.data());
    zs.avail_in = static_cast<uInt>(gz.size());
    int rc = Z_OK;
    while (true) {
        zs.next_out = chunk.data();
        zs.avail_out = static_cast<uInt>(chunk.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
        if (rc == Z_STREAM_END) {
            // Concatenated members are legal gzip.
            if (zs.avail_in == 0) break;
            if (inflateReset(&zs) != Z_OK) break;
            continue;
        }
        if (rc != Z_OK) break;
        if (zs.avail_in == 0 && zs.avail_out != 0) break;
    }
    inflateEnd(&zs);
    if (rc == Z_DATA_ERROR || rc == Z_NEED_DICT) throw NiftiError("gzip", "corrupt deflate stream");
    if (rc != Z_STREAM_END) throw NiftiError("truncated", "gzip stream ends early");
    return out;
}

NiftiVolume parse_nifti(const std::vector<std::uint8_t>& input) {
    const std::vector<std::uint8_t> inflated = is_gzip(input) ? gzip_decompress(input) : std::vector<std::uint8_t>{};
    const auto& b = is_gzip(input) ? inflated : input;
    if (b.size() < kNiftiHeaderSize)
        throw NiftiError("truncated", "file holds " + std::to_string(b.size()) + " bytes, header needs 348");

    std::int32_t hdr_le;
    std::memcpy(&hdr_le, b.data(), 4);
    bool swap;
    if (hdr_le == 348)
        swap = false;
    else if (__builtin_bswap32(static_cast<std::uint32_t>(hdr_le)) == 348u)
        swap = true;
    else
        throw NiftiError("sizeof_hdr", "sizeof_hdr is " + std::to_string(hdr_le) + ", expected 348");
    if constexpr (std::endian::native == std::endian::big) swap = !swap;
    const Reader r(b.data(), swap);

    if (std::memcmp(b.data() + kMagic, "n+1\0", 4) != 0) {
        if (std::memcmp(b.data() + kMagic, "ni1\0", 4) == 0)
            throw NiftiError("magic", "detached header/image pairs (ni1) are not supported");
        throw NiftiError("magic", "magic is not \"n+1\"");
    }

    const int code = r.get<std::int16_t>(kDatatype);
    if (!nifti_type_supported(code)) throw NiftiError("datatype", "unsupported datatype code " + std::to_string(code));
    NiftiVolume vol;
    vol.dtype = static_cast<NiftiType>(code);

    const int ndim = r.get<std::int16_t>(kDim);
    if (ndim < 1 || ndim > 7) throw NiftiError("dim", "dim[0] = " + std::to_string(ndim) + " is outside 1..7");
    for (int i = 1; i <= ndim; ++i) {
        const int e = r.get<std::int16_t>(kDim + 2 * i);
        if (e < 1) throw NiftiError("dim", "dim[" + std::to_string(i) + "] = " + std::to_string(e));
        if (i <= 3)
            vol.dims[i - 1] = static_cast<std::size_t>(e);
        else if (e != 1)
            throw NiftiError("dim", "only up to 3 spatial dimensions are supported");
    }
    for (int i = 1; i <= 3; ++i) {
        const double s = i <= ndim ? std::abs(static_cast<double>(r.get<float>(kPixdim + 4 * i))) : 1.0;
        vol.spacing[i - 1] = s > 0.0 ? s : 1.0;
    }

    const float vox_offset = r.get<float>(kVoxOffset);
    if (!(vox_offset >= static_cast<float>(kNiftiDataOffset)) || vox_offset != std::floor(vox_offset))
        throw NiftiError("vox_offset", "vox_offset " + std::to_string(vox_offset) + " must be an integer >= 352");
    const std::size_t offset = static_cast<std::size_t>(vox_offset);
    const std::size_t n = dims_numel(vol.dims);
    const std::size_t esize = nifti_type_size(vol.dtype);
    if (b.size() < offset + n * esize)
        throw NiftiError("truncated", "payload needs " + std::to_string(n * esize) + " bytes after offset " +
                                          std::to_string(offset) + ", file has " + std::to_string(b.size()));

    double slope = r.get<float>(kSclSlope);
    double inter = r.get<float>(kSclInter);
    const bool scaled = std::isfinite(slope) && slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    if (!std::isfinite(inter)) inter = 0.0;

    const std::size_t nx = vol.dims[0], ny = vol.dims[1], nz = vol.dims[2];
    vol.data.resize(n);
    for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                const std::size_t file_index = (z * ny + y) * nx + x;
                double v = decode_value(vol.dtype, r, offset + file_index * esize);
                if (scaled) v = v * slope + inter;
                vol.data[(x * ny + y) * nz + z] = v;
            }
    if (!swap) vol.header.assign(b.begin(), b.begin() + kNiftiHeaderSize);
    return vol;
}

NiftiVolume read_nifti(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_nifti(bytes);
}

std::vector<std::uint8_t> encode_nifti(const NiftiVolume& vol) {
    const std::size_t n = dims_numel(vol.dims);
    if (vol.data.size() != n)
        throw DimensionError("nifti: " + dims_str(vol.dims) + " volume holds " + std::to_string(vol.data.size()) +
                             " values");
    for (auto e : vol.dims)
        if (e < 1 || e > 32767) throw DimensionError("nifti: extent " + std::to_string(e) + " out of range");
    const std::size_t esize = nifti_type_size(vol.dtype);
    std::vector<std::uint8_t> buf(kNiftiDataOffset + n * esize, 0);

    std::int32_t retained_size = 0;
    if (vol.header.size() == kNiftiHeaderSize) std::memcpy(&retained_size, vol.header.data(), 4);
    if (retained_size == 348) {
        std::memcpy(buf.data(), vol.header.data(), kNiftiHeaderSize);
    } else {
        put<std::int16_t>(buf, kQformCode, 0);
        put<std::int16_t>(buf, kSformCode, 0);
        buf[kXyztUnits] = 2;  // millimetres
    }
    put<std::int32_t>(buf, kSizeofHdr, 348);
    put<std::int16_t>(buf, kDim, 3);
    for (int i = 0; i < 3; ++i) put<std::int16_t>(buf, kDim + 2 * (i + 1), static_cast<std::int16_t>(vol.dims[i]));
    for (int i = 4; i <= 7; ++i) put<std::int16_t>(buf, kDim + 2 * i, 1);
    put<std::int16_t>(buf, kDatatype, static_cast<std::int16_t>(vol.dtype));
    put<std::int16_t>(buf, kBitpix, static_cast<std::int16_t>(8 * esize));
    put<float>(buf, kPixdim, 1.0f);
    for (int i = 0; i < 3; ++i) {
        const float s = static_cast<float>(vol.spacing[i]);
        if (!(s > 0.0f)) throw ParameterError("nifti: spacing must be positive");
        put<float>(buf, kPixdim + 4 * (i + 1), s);
    }
    for (int i = 4; i <= 7; ++i) put<float>(buf, kPixdim + 4 * i, 1.0f);
    put<float>(buf, kVoxOffset, static_cast<float>(kNiftiDataOffset));
    put<float>(buf, kSclSlope, 1.0f);
    put<float>(buf, kSclInter, 0.0f);
    std::memcpy(buf.data() + kMagic, "n+1\0", 4);
    std::memset(buf.data() + kNiftiHeaderSize, 0, 4);  // no extensions

    const std::size_t nx = vol.dims[0], ny = vol.dims[1], nz = vol.dims[2];
    for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x)
                encode_value(vol.dtype, buf, kNiftiDataOffset + ((z * ny + y) * nx + x) * esize,
                             vol.data[(x * ny + y) * nz + z]);
    return buf;
}

void write_nifti(const NiftiVolume& vol, const std::filesystem::path& path) {
    auto bytes = encode_nifti(vol);
    if (path.extension() == ".gz") bytes = gzip_compress(bytes);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

LabelMask to_label_mask(const NiftiVolume& vol) {
    LabelMask m;
    m.dims = vol.dims;
    m.spacing = vol.spacing;
    m.labels.resize(vol.data.size());
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
        const double v = vol.data[i];
        if (!(v == std::floor(v)) || !LabelMask::valid_label(static_cast<long>(v)))
            throw ValidationError("label value " + std::to_string(v) + " at voxel " + std::to_string(i) +
                                  " is outside {0,1,2,4}");
        m.labels[i] = static_cast<std::uint8_t>(v);
    }
    return m;
}

NiftiVolume from_label_mask(const LabelMask& mask) {
    mask.validate();
    NiftiVolume v;
    v.dims = mask.dims;
    v.spacing = mask.spacing;
    v.dtype = NiftiType::UInt8;
    v.data.assign(mask.labels.begin(), mask.labels.end());
    return v;
}

}  // namespace cotseg
