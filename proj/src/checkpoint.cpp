#include "atlasgen/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "atlasgen/rng.hpp"

namespace atlasgen {

namespace {
constexpr char kMagic[8] = {'A', 'G', 'C', 'K', 'P', 'T', '1', '\n'};

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
} // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open checkpoint for writing: " + tmp);
        os.write(kMagic, sizeof(kMagic));
        const std::string meta = ck.meta.dump();
        put<uint64_t>(os, meta.size());
        os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
        put<uint64_t>(os, ck.tensors.size());
        for (const auto& [name, t] : ck.tensors) {
            put<uint32_t>(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
            for (int d : t.shape) put<int32_t>(os, d);
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(real)));
        }
        if (!os) throw DataError("short write on checkpoint: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("cannot move checkpoint into place: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint not found: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("not a checkpoint file: " + path);
    Checkpoint ck;
    const auto meta_len = get<uint64_t>(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    ck.meta = nlohmann::json::parse(meta, nullptr, false);
    if (ck.meta.is_discarded()) throw DataError("corrupt checkpoint metadata: " + path);
    const auto n = get<uint64_t>(is);
    for (uint64_t i = 0; i < n; ++i) {
        const auto name_len = get<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto ndim = get<uint32_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = get<int32_t>(is);
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(real)));
        if (!is) throw DataError("truncated checkpoint: " + path);
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot hash missing file: " + path);
    uint64_t h = 14695981039346656037ull;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

void load_params(ad::ParamMap& params, const Checkpoint& ck) {
    for (auto& [name, var] : params.items) {
        const Tensor* t = ck.find(name);
        if (!t) throw DataError("checkpoint is missing parameter '" + name + "'");
        if (t->shape != var.value().shape)
            throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                             shape_str(t->shape) + ", model expects " +
                             shape_str(var.value().shape));
        var.node()->value = *t;
    }
}

void save_params(const ad::ParamMap& params, Checkpoint& ck) {
    for (const auto& [name, var] : params.items) ck.tensors.emplace_back(name, var.value());
}

void require_trained(const Checkpoint& ck, const std::string& what) {
    if (!ck.meta.value("trained", false))
        throw DataError(what + ": checkpoint is not marked trained; finish the phase first");
}

} // namespace atlasgen
