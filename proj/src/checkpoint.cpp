#include "ditair/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ditair {

namespace {

// This code only targets little-endian hosts; the format is defined as
// little-endian so plain memcpy writes are the on-disk layout.
template <typename U>
void put(std::ofstream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::ifstream& in, const std::string& path) {
    U v;
    in.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!in) throw ConfigError("truncated checkpoint: " + path);
    return v;
}

}  // namespace

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
    out.write("DITA", 4);
    put<uint32_t>(out, kCheckpointVersion);
    put<uint64_t>(out, static_cast<uint64_t>(store.count()));
    for (const auto& e : store.entries()) {
        put<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<uint32_t>(out, static_cast<uint32_t>(e.value.rank()));
        for (int64_t d : e.value.shape) put<int64_t>(out, d);
        if constexpr (std::is_same_v<T, float>) {
            out.write(reinterpret_cast<const char*>(e.value.ptr()),
                      static_cast<std::streamsize>(e.value.size() * sizeof(float)));
        } else {
            std::vector<float> f(static_cast<size_t>(e.value.size()));
            for (int64_t i = 0; i < e.value.size(); ++i)
                f[static_cast<size_t>(i)] = static_cast<float>(e.value[i]);
            out.write(reinterpret_cast<const char*>(f.data()),
                      static_cast<std::streamsize>(f.size() * sizeof(float)));
        }
    }
    if (!out) throw ConfigError("failed writing checkpoint: " + path);
}

template <typename T>
void load_checkpoint(ParamStore<T>& store, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DITA", 4) != 0)
        throw ConfigError("bad checkpoint magic: " + path);
    const auto version = get<uint32_t>(in, path);
    if (version != kCheckpointVersion)
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    const auto count = get<uint64_t>(in, path);
    if (count != static_cast<uint64_t>(store.count()))
        throw ConfigError("checkpoint holds " + std::to_string(count) +
                          " tensors, model expects " + std::to_string(store.count()));
    for (auto& e : store.entries()) {
        const auto name_len = get<uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw ConfigError("truncated checkpoint: " + path);
        if (name != e.name)
            throw ConfigError("checkpoint tensor '" + name + "' does not match model tensor '" +
                              e.name + "'");
        const auto rank = get<uint32_t>(in, path);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = get<int64_t>(in, path);
        if (shape != e.value.shape)
            throw ConfigError("checkpoint shape " + shape_str(shape) + " for '" + name +
                              "' does not match model shape " + shape_str(e.value.shape));
        std::vector<float> f(static_cast<size_t>(numel(shape)));
        in.read(reinterpret_cast<char*>(f.data()),
                static_cast<std::streamsize>(f.size() * sizeof(float)));
        if (!in) throw ConfigError("truncated checkpoint: " + path);
        for (size_t i = 0; i < f.size(); ++i) e.value.data[i] = static_cast<T>(f[i]);
    }
}

template void save_checkpoint<float>(const ParamStore<float>&, const std::string&);
template void save_checkpoint<double>(const ParamStore<double>&, const std::string&);
template void load_checkpoint<float>(ParamStore<float>&, const std::string&);
template void load_checkpoint<double>(ParamStore<double>&, const std::string&);

}  // namespace ditair
