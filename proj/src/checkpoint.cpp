#include "sinklab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "sinklab/config.hpp"

namespace sinklab {

namespace {

constexpr char kMagic[8] = {'S', 'L', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kDtypeF64LE = 0;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64_buffer(std::ostream& out, const std::vector<double>& data) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
    } else {
        for (double d : data) write_u64(out, std::bit_cast<std::uint64_t>(d));
    }
}

void read_f64_buffer(std::istream& in, std::vector<double>& data) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
    } else {
        for (double& d : data) d = std::bit_cast<double>(read_u64(in));
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const Parameters& params, const ModelConfig& cfg) {
    const auto named = params.named();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint file '" + path + "' for writing");

    out.write(kMagic, sizeof(kMagic));
    write_u64(out, named.size());
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : named) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<std::uint32_t>(tensor.shape().size()));
        for (std::size_t d : tensor.shape()) write_u64(out, d);
        write_u32(out, kDtypeF64LE);
        write_u64(out, offset);
        const std::uint64_t bytes = tensor.numel() * sizeof(double);
        write_u64(out, bytes);
        offset += bytes;
    }
    write_u64(out, offset);
    for (const auto& [name, tensor] : named) write_f64_buffer(out, tensor.values());
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
    out.close();

    std::ofstream side(path + ".config", std::ios::trunc);
    if (!side) throw IoError("cannot open sidecar '" + path + ".config' for writing");
    write_model_config(side, cfg);
    if (!side) throw IoError("failed writing sidecar for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    ConfigDoc side = ConfigDoc::parse_file(path + ".config");
    LoadedCheckpoint loaded;
    loaded.cfg = read_model_config(side);
    side.finish();

    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint file '" + path + "'");
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(kMagic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ContainerError("'" + path + "' is not a checkpoint container");

    struct Entry {
        Shape shape;
        std::uint64_t offset;
        std::uint64_t bytes;
    };
    std::map<std::string, Entry> manifest;
    const std::uint64_t count = read_u64(in);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        Entry e;
        const std::uint32_t ndim = read_u32(in);
        e.shape.resize(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d) e.shape[d] = read_u64(in);
        const std::uint32_t dtype = read_u32(in);
        if (dtype != kDtypeF64LE)
            throw ContainerError("tensor '" + name + "' has unsupported dtype tag " +
                                 std::to_string(dtype));
        e.offset = read_u64(in);
        e.bytes = read_u64(in);
        if (e.bytes != shape_numel(e.shape) * sizeof(double))
            throw ContainerError("tensor '" + name + "' has inconsistent byte length");
        if (!manifest.emplace(name, e).second)
            throw ContainerError("duplicate tensor '" + name + "' in manifest");
    }
    const std::uint64_t data_size = read_u64(in);
    if (!in) throw ContainerError("truncated manifest in '" + path + "'");
    const std::streampos data_start = in.tellg();

    // Allocate the parameter structure for the sidecar config, then fill it.
    loaded.params = init_parameters(loaded.cfg, 0);
    for (auto& [name, tensor] : loaded.params.named()) {
        auto it = manifest.find(name);
        if (it == manifest.end())
            throw ContainerError("checkpoint is missing tensor '" + name + "'");
        if (it->second.shape != tensor.shape())
            throw ContainerError("tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                                 ", config requires " + shape_str(tensor.shape()));
        if (it->second.offset + it->second.bytes > data_size)
            throw ContainerError("tensor '" + name + "' extends past the data section");
        in.seekg(data_start + static_cast<std::streamoff>(it->second.offset));
        read_f64_buffer(in, tensor.mutable_values());
        if (!in) throw ContainerError("truncated data for tensor '" + name + "'");
        manifest.erase(it);
    }
    if (!manifest.empty())
        throw ContainerError("checkpoint contains unexpected tensor '" +
                             manifest.begin()->first + "'");
    return loaded;
}

}  // namespace sinklab
