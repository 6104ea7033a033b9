#include "splitshield/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace splitshield {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw std::runtime_error(std::string("checkpoint: truncated ") + what);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return buf[pos++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(buf[pos]) |
                          static_cast<std::uint16_t>(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
};

}  // namespace

Checkpoint save_checkpoint(const ModelGraph& model) {
    Checkpoint ck;
    for (const auto& name : weight_names(model)) {
        const Tensor& t = model.weight(name);
        CheckpointEntry e;
        e.name = name;
        e.dims.assign(t.shape.begin(), t.shape.end());
        e.values = t.data;
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'S', 'S', 'H', 'D'});
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
    for (const auto& e : ck.entries) {
        if (e.name.size() > 0xffff)
            throw std::invalid_argument("checkpoint: entry name too long");
        put_u16(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(e.dtype);
        out.push_back(static_cast<std::uint8_t>(e.dims.size()));
        std::uint64_t count = 1;
        for (std::uint64_t d : e.dims) {
            put_u64(out, d);
            count *= d;
        }
        if (e.dims.empty()) count = 0;
        if (count != e.values.size())
            throw std::invalid_argument("checkpoint: entry '" + e.name +
                                        "' payload does not match its dims");
        const std::size_t base = out.size();
        out.resize(base + e.values.size() * 4);
        for (std::size_t i = 0; i < e.values.size(); ++i) {
            const std::uint32_t bits = std::bit_cast<std::uint32_t>(e.values[i]);
            out[base + 4 * i + 0] = static_cast<std::uint8_t>(bits);
            out[base + 4 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
            out[base + 4 * i + 2] = static_cast<std::uint8_t>(bits >> 16);
            out[base + 4 * i + 3] = static_cast<std::uint8_t>(bits >> 24);
        }
    }
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    r.need(4, "header");
    if (std::memcmp(bytes.data(), "SSHD", 4) != 0)
        throw std::runtime_error("checkpoint: corrupt header (bad magic)");
    r.pos = 4;
    const std::uint32_t version = r.u32("header");
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32("header");
    Checkpoint ck;
    ck.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const std::uint16_t name_len = r.u16("entry name length");
        r.need(name_len, "entry name");
        e.name.assign(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
        r.pos += name_len;
        e.dtype = r.u8("dtype code");
        if (e.dtype != 0)
            throw std::runtime_error("checkpoint: dtype mismatch (code " +
                                     std::to_string(e.dtype) + " in entry '" + e.name + "')");
        const std::uint8_t ndim = r.u8("ndim");
        std::uint64_t n = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            e.dims.push_back(r.u64("dims"));
            n *= e.dims.back();
        }
        if (ndim == 0) n = 0;
        r.need(n * 4, "payload");
        e.values.resize(n);
        for (std::uint64_t v = 0; v < n; ++v) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(bytes[r.pos + 4 * v + b]) << (8 * b);
            e.values[v] = std::bit_cast<float>(bits);
        }
        r.pos += n * 4;
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

void write_checkpoint_file(const std::string& path, const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

ModelGraph load_checkpoint(const Checkpoint& ck, const ModelGraph& structure) {
    ModelGraph out = structure;
    const auto names = weight_names(structure);
    if (names.size() != ck.entries.size())
        throw std::runtime_error("checkpoint: entry count " + std::to_string(ck.entries.size()) +
                                 " does not match graph with " + std::to_string(names.size()) +
                                 " weights");
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto& e = ck.entries[i];
        if (e.name != names[i])
            throw std::runtime_error("checkpoint: entry '" + e.name + "' where '" + names[i] +
                                     "' was expected");
        Tensor& w = out.weight(e.name);
        std::vector<std::size_t> dims(e.dims.begin(), e.dims.end());
        if (dims != w.shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + e.name + "'");
        w.data = e.values;
    }
    return out;
}

ModelGraph load_checkpoint(const Checkpoint& ck, const ArchSpec& arch) {
    return load_checkpoint(ck, build_model(arch, 0));
}

}  // namespace splitshield
