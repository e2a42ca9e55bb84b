#include "atlasgen/nifti.hpp"

#include <cstring>
#include <vector>

#include <zlib.h>

namespace atlasgen {
namespace dataio {

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must pack to 348 bytes");

constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_INT32 = 8;
constexpr int16_t DT_FLOAT32 = 16;
constexpr int16_t DT_FLOAT64 = 64;

struct GzFileCloser {
    gzFile f;
    ~GzFileCloser() {
        if (f) gzclose(f);
    }
};

} // namespace

NiftiVolume read_nifti(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb"); // reads both plain and gzip streams
    if (!f) throw DataError("cannot open volume file: " + path);
    GzFileCloser closer{f};

    NiftiHeader h{};
    if (gzread(f, &h, sizeof(h)) != static_cast<int>(sizeof(h)))
        throw DataError("truncated NIfTI header: " + path);
    if (h.sizeof_hdr != 348)
        throw DataError("unsupported NIfTI file (bad or byte-swapped header): " + path);
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw DataError("unsupported NIfTI variant (expected single-file n+1): " + path);

    const int ndim = h.dim[0];
    if (ndim < 3 || ndim > 5) throw DataError("unsupported NIfTI dimensionality in " + path);
    const int nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
    const int nt = ndim >= 4 ? std::max<int>(1, h.dim[4]) : 1;
    const int nu = ndim >= 5 ? std::max<int>(1, h.dim[5]) : 1;
    if (nx <= 0 || ny <= 0 || nz <= 0) throw DataError("bad NIfTI dims in " + path);
    // vectors may ride in dim[5] (preferred) or dim[4]
    int comps = 1;
    if (nu > 1 && nt == 1) comps = nu;
    else if (nt > 1 && nu == 1) comps = nt;
    else if (nt > 1 && nu > 1)
        throw DataError("unsupported NIfTI layout (4D+5D) in " + path);

    const int64_t nvox = static_cast<int64_t>(nx) * ny * nz * comps;
    int64_t elem_size;
    switch (h.datatype) {
        case DT_UINT8: elem_size = 1; break;
        case DT_INT16: elem_size = 2; break;
        case DT_INT32: elem_size = 4; break;
        case DT_FLOAT32: elem_size = 4; break;
        case DT_FLOAT64: elem_size = 8; break;
        default:
            throw DataError("unsupported NIfTI datatype " + std::to_string(h.datatype) + " in " + path);
    }

    const long skip = static_cast<long>(h.vox_offset) - static_cast<long>(sizeof(h));
    if (skip < 0) throw DataError("bad vox_offset in " + path);
    std::vector<char> skip_buf(static_cast<size_t>(skip));
    if (skip > 0 && gzread(f, skip_buf.data(), static_cast<unsigned>(skip)) != skip)
        throw DataError("truncated NIfTI extensions in " + path);

    std::vector<char> raw(static_cast<size_t>(nvox * elem_size));
    const int64_t want = nvox * elem_size;
    int64_t got = 0;
    while (got < want) {
        const int chunk = static_cast<int>(std::min<int64_t>(want - got, 1 << 24));
        const int r = gzread(f, raw.data() + got, static_cast<unsigned>(chunk));
        if (r <= 0) throw DataError("truncated NIfTI data in " + path);
        got += r;
    }

    NiftiVolume out;
    out.data = comps == 1 ? Tensor({nz, ny, nx}) : Tensor({comps, nz, ny, nx});
    const real slope = (h.scl_slope == 0.0f) ? 1.0 : static_cast<real>(h.scl_slope);
    const real inter = static_cast<real>(h.scl_inter);
    // NIfTI is x-fastest; with nx=W, ny=H, nz=D the linear order matches ours.
    for (int64_t i = 0; i < nvox; ++i) {
        real v;
        switch (h.datatype) {
            case DT_UINT8: v = static_cast<real>(reinterpret_cast<unsigned char*>(raw.data())[i]); break;
            case DT_INT16: {
                int16_t s;
                std::memcpy(&s, raw.data() + i * 2, 2);
                v = static_cast<real>(s);
                break;
            }
            case DT_INT32: {
                int32_t s;
                std::memcpy(&s, raw.data() + i * 4, 4);
                v = static_cast<real>(s);
                break;
            }
            case DT_FLOAT32: {
                float s;
                std::memcpy(&s, raw.data() + i * 4, 4);
                v = static_cast<real>(s);
                break;
            }
            default: {
                double s;
                std::memcpy(&s, raw.data() + i * 8, 8);
                v = static_cast<real>(s);
                break;
            }
        }
        out.data.data[static_cast<size_t>(i)] = slope * v + inter;
    }
    out.meta.spacing[0] = h.pixdim[3]; // D
    out.meta.spacing[1] = h.pixdim[2]; // H
    out.meta.spacing[2] = h.pixdim[1]; // W
    out.meta.origin[0] = h.qoffset_z;
    out.meta.origin[1] = h.qoffset_y;
    out.meta.origin[2] = h.qoffset_x;
    return out;
}

void write_nifti(const std::string& path, const Tensor& data, const voxelcore::VolumeMeta& meta,
                 NiftiDtype dtype) {
    check(data.ndim() == 3 || data.ndim() == 4, "write_nifti: data must be [D,H,W] or [C,D,H,W]");
    const bool vec = data.ndim() == 4;
    const int comps = vec ? data.dim(0) : 1;
    const int D = data.dim(vec ? 1 : 0), H = data.dim(vec ? 2 : 1), W = data.dim(vec ? 3 : 2);

    NiftiHeader h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = static_cast<int16_t>(vec ? 5 : 3);
    h.dim[1] = static_cast<int16_t>(W);
    h.dim[2] = static_cast<int16_t>(H);
    h.dim[3] = static_cast<int16_t>(D);
    h.dim[4] = 1;
    h.dim[5] = static_cast<int16_t>(comps);
    h.dim[6] = 1;
    h.dim[7] = 1;
    if (vec) h.intent_code = 1007; // vector-valued voxels
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(meta.spacing[2]);
    h.pixdim[2] = static_cast<float>(meta.spacing[1]);
    h.pixdim[3] = static_cast<float>(meta.spacing[0]);
    h.pixdim[4] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.sform_code = 1;
    h.qform_code = 0;
    h.qoffset_x = static_cast<float>(meta.origin[2]);
    h.qoffset_y = static_cast<float>(meta.origin[1]);
    h.qoffset_z = static_cast<float>(meta.origin[0]);
    h.srow_x[0] = static_cast<float>(meta.spacing[2]);
    h.srow_x[3] = static_cast<float>(meta.origin[2]);
    h.srow_y[1] = static_cast<float>(meta.spacing[1]);
    h.srow_y[3] = static_cast<float>(meta.origin[1]);
    h.srow_z[2] = static_cast<float>(meta.spacing[0]);
    h.srow_z[3] = static_cast<float>(meta.origin[0]);
    std::memcpy(h.magic, "n+1", 4);

    int16_t dt;
    int64_t elem;
    switch (dtype) {
        case NiftiDtype::U8: dt = DT_UINT8; elem = 1; break;
        case NiftiDtype::I16: dt = DT_INT16; elem = 2; break;
        case NiftiDtype::F32: dt = DT_FLOAT32; elem = 4; break;
        default: dt = DT_FLOAT64; elem = 8; break;
    }
    h.datatype = dt;
    h.bitpix = static_cast<int16_t>(elem * 8);

    const int64_t nvox = data.numel();
    std::vector<char> raw(static_cast<size_t>(nvox * elem));
    for (int64_t i = 0; i < nvox; ++i) {
        const real v = data.data[static_cast<size_t>(i)];
        switch (dtype) {
            case NiftiDtype::U8: {
                const int iv = static_cast<int>(std::lround(v));
                check(iv >= 0 && iv <= 255, "write_nifti: value out of uint8 range");
                raw[static_cast<size_t>(i)] = static_cast<char>(static_cast<unsigned char>(iv));
                break;
            }
            case NiftiDtype::I16: {
                const int16_t s = static_cast<int16_t>(std::lround(v));
                std::memcpy(raw.data() + i * 2, &s, 2);
                break;
            }
            case NiftiDtype::F32: {
                const float s = static_cast<float>(v);
                std::memcpy(raw.data() + i * 4, &s, 4);
                break;
            }
            default: {
                const double s = v;
                std::memcpy(raw.data() + i * 8, &s, 8);
                break;
            }
        }
    }

    const char pad[4] = {0, 0, 0, 0};
    const bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
    if (gz) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw DataError("cannot write volume file: " + path);
        GzFileCloser closer{f};
        if (gzwrite(f, &h, sizeof(h)) != static_cast<int>(sizeof(h)) || gzwrite(f, pad, 4) != 4)
            throw DataError("short write on " + path);
        int64_t done = 0;
        while (done < static_cast<int64_t>(raw.size())) {
            const int chunk = static_cast<int>(std::min<int64_t>(raw.size() - done, 1 << 24));
            if (gzwrite(f, raw.data() + done, static_cast<unsigned>(chunk)) != chunk)
                throw DataError("short write on " + path);
            done += chunk;
        }
    } else {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        if (!f) throw DataError("cannot write volume file: " + path);
        const bool ok = std::fwrite(&h, sizeof(h), 1, f) == 1 && std::fwrite(pad, 4, 1, f) == 1 &&
                        (raw.empty() || std::fwrite(raw.data(), raw.size(), 1, f) == 1);
        std::fclose(f);
        if (!ok) throw DataError("short write on " + path);
    }
}

} // namespace dataio
} // namespace atlasgen
