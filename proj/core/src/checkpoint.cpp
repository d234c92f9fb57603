#include "ssmg/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

#include "ssmg/errors.hpp"

namespace ssmg {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'M', 'G'};
constexpr uint8_t kDtypeF32 = 0;

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_bytes(FILE* f, const void* p, size_t n) {
    if (fwrite(p, 1, n, f) != n) throw IoError("checkpoint: short write");
}

void read_bytes(FILE* f, void* p, size_t n) {
    if (fread(p, 1, n, f) != n) throw IoError("checkpoint: short read");
}

void write_u32(FILE* f, uint32_t v) { write_bytes(f, &v, sizeof v); }
void write_u64(FILE* f, uint64_t v) { write_bytes(f, &v, sizeof v); }

uint32_t read_u32(FILE* f) {
    uint32_t v;
    read_bytes(f, &v, sizeof v);
    return v;
}

uint64_t read_u64(FILE* f) {
    uint64_t v;
    read_bytes(f, &v, sizeof v);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::string tmp = path + ".tmp";
    FilePtr f(fopen(tmp.c_str(), "wb"));
    if (!f) throw IoError("checkpoint: cannot open " + tmp + " for writing");
    write_bytes(f.get(), kMagic, 4);
    write_u32(f.get(), kCheckpointVersion);
    write_u64(f.get(), config_json.size());
    write_bytes(f.get(), config_json.data(), config_json.size());
    write_u32(f.get(), static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        write_u32(f.get(), static_cast<uint32_t>(name.size()));
        write_bytes(f.get(), name.data(), name.size());
        uint8_t dtype = kDtypeF32;
        write_bytes(f.get(), &dtype, 1);
        write_u32(f.get(), static_cast<uint32_t>(tensor->shape.size()));
        for (int64_t d : tensor->shape) write_u64(f.get(), static_cast<uint64_t>(d));
        write_bytes(f.get(), tensor->data.data(), tensor->data.size() * sizeof(float));
    }
    if (fflush(f.get()) != 0) throw IoError("checkpoint: flush failed");
    f.reset();
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("checkpoint: cannot move " + tmp + " into place");
}

Checkpoint load_checkpoint(const std::string& path) {
    FilePtr f(fopen(path.c_str(), "rb"));
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    read_bytes(f.get(), magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic in " + path);
    uint32_t version = read_u32(f.get());
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));
    uint64_t cfg_len = read_u64(f.get());
    Checkpoint ck;
    ck.config_json.resize(cfg_len);
    read_bytes(f.get(), ck.config_json.data(), cfg_len);
    uint32_t count = read_u32(f.get());
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_u32(f.get());
        std::string name(name_len, '\0');
        read_bytes(f.get(), name.data(), name_len);
        uint8_t dtype;
        read_bytes(f.get(), &dtype, 1);
        if (dtype != kDtypeF32)
            throw IoError("checkpoint: unsupported dtype tag " + std::to_string(dtype));
        uint32_t rank = read_u32(f.get());
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = static_cast<int64_t>(read_u64(f.get()));
        Tensor t(shape);
        read_bytes(f.get(), t.data.data(), t.data.size() * sizeof(float));
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    return ck;
}

}  // namespace ssmg
