#include "spes/wire.hpp"

#include <cstring>
#include <fstream>
#include <unordered_set>

namespace spes {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
    std::span<const uint8_t> buf;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > buf.size())
            throw ProtocolError(ProtoError::Truncated,
                                std::string("truncated payload while reading ") + what);
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return buf[pos++];
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>(buf[pos] | (buf[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
};

}  // namespace

std::vector<uint8_t> encode_message(const WireMessage& msg) {
    std::vector<uint8_t> out;
    out.reserve(kHeaderBytes + msg.payload.size());
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    out.push_back(msg.version);
    out.push_back(static_cast<uint8_t>(msg.kind));
    put_u32(out, msg.round);
    put_u64(out, static_cast<uint64_t>(msg.payload.size()));
    out.insert(out.end(), msg.payload.begin(), msg.payload.end());
    return out;
}

WireMessage decode_message(std::span<const uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes)
        throw ProtocolError(ProtoError::Truncated, "message shorter than 18-byte header");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw ProtocolError(ProtoError::BadMagic, "bad magic bytes");
    Reader r{bytes, 4};
    WireMessage msg;
    msg.version = r.u8("version");
    if (msg.version != kWireVersion)
        throw ProtocolError(ProtoError::BadVersion,
                            "unsupported wire version " + std::to_string(msg.version));
    uint8_t kind = r.u8("kind");
    if (kind > static_cast<uint8_t>(MsgKind::Bye))
        throw ProtocolError(ProtoError::UnknownKind, "unknown message kind " + std::to_string(kind));
    msg.kind = static_cast<MsgKind>(kind);
    msg.round = r.u32("round");
    uint64_t len = r.u64("payload length");
    if (len != bytes.size() - kHeaderBytes)
        throw ProtocolError(ProtoError::LengthMismatch,
                            "payload length field " + std::to_string(len) + " != actual " +
                                std::to_string(bytes.size() - kHeaderBytes));
    msg.payload.assign(bytes.begin() + kHeaderBytes, bytes.end());
    return msg;
}

std::vector<uint8_t> encode_blocks(const std::vector<NamedBlock>& blocks) {
    std::vector<uint8_t> out;
    put_u32(out, static_cast<uint32_t>(blocks.size()));
    for (const auto& b : blocks) {
        if (b.name.size() > 0xffff)
            throw std::invalid_argument("block name too long: " + b.name);
        put_u16(out, static_cast<uint16_t>(b.name.size()));
        out.insert(out.end(), b.name.begin(), b.name.end());
        out.push_back(0);  // dtype f32
        out.push_back(static_cast<uint8_t>(b.tensor.rank()));
        for (int64_t d : b.tensor.shape) put_u32(out, static_cast<uint32_t>(d));
        size_t base = out.size();
        out.resize(base + b.tensor.data.size() * 4);
        std::memcpy(out.data() + base, b.tensor.data.data(), b.tensor.data.size() * 4);
    }
    return out;
}

std::vector<NamedBlock> decode_blocks(std::span<const uint8_t> payload) {
    Reader r{payload, 0};
    uint32_t count = r.u32("block count");
    std::vector<NamedBlock> out;
    std::unordered_set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = r.u16("name length");
        r.need(nlen, "block name");
        std::string name(reinterpret_cast<const char*>(payload.data() + r.pos), nlen);
        r.pos += nlen;
        if (!seen.insert(name).second)
            throw ProtocolError(ProtoError::MalformedPayload, "duplicate block name " + name);
        uint8_t dtype = r.u8("dtype");
        if (dtype != 0)
            throw ProtocolError(ProtoError::MalformedPayload,
                                "unsupported dtype " + std::to_string(dtype));
        uint8_t rank = r.u8("rank");
        if (rank == 0 || rank > 4)
            throw ProtocolError(ProtoError::MalformedPayload, "bad rank for block " + name);
        std::vector<int64_t> shape;
        uint64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint32_t dim = r.u32("dim");
            shape.push_back(static_cast<int64_t>(dim));
            numel *= dim;
            if (numel > (1ull << 33))
                throw ProtocolError(ProtoError::MalformedPayload,
                                    "implausible element count for block " + name);
        }
        r.need(numel * 4, "block values");
        std::vector<float> data(numel);
        std::memcpy(data.data(), payload.data() + r.pos, numel * 4);
        r.pos += numel * 4;
        out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    if (r.pos != payload.size())
        throw ProtocolError(ProtoError::MalformedPayload, "trailing bytes after blocks");
    return out;
}

std::vector<NamedBlock> model_to_blocks(const ModelParams& params) {
    std::vector<NamedBlock> out;
    for (const auto& b : enumerate_blocks(params.config))
        out.push_back({b.name, block_tensor(params, b)});
    return out;
}

void blocks_into_model(ModelParams& params, const std::vector<NamedBlock>& blocks) {
    auto descs = enumerate_blocks(params.config);
    if (blocks.size() != descs.size())
        throw ProtocolError(ProtoError::MalformedPayload,
                            "model payload block count " + std::to_string(blocks.size()) +
                                " != expected " + std::to_string(descs.size()));
    for (size_t i = 0; i < descs.size(); ++i) {
        if (blocks[i].name != descs[i].name || blocks[i].tensor.shape != descs[i].shape)
            throw ProtocolError(ProtoError::MalformedPayload,
                                "unexpected block " + blocks[i].name + " at position " +
                                    std::to_string(i));
        block_tensor(params, descs[i]) = blocks[i].tensor;
    }
}

std::vector<uint8_t> encode_hello(const HelloPayload& h) {
    std::vector<uint8_t> out;
    put_u32(out, h.node_id);
    put_u64(out, h.config_hash);
    return out;
}

HelloPayload decode_hello(std::span<const uint8_t> p) {
    Reader r{p, 0};
    HelloPayload h;
    h.node_id = r.u32("node id");
    h.config_hash = r.u64("config hash");
    if (r.pos != p.size())
        throw ProtocolError(ProtoError::MalformedPayload, "trailing bytes in HELLO");
    return h;
}

std::vector<uint8_t> encode_assign(const AssignPayload& a) {
    std::vector<uint8_t> out;
    put_u32(out, a.node_id);
    put_u32(out, static_cast<uint32_t>(a.experts.size()));
    for (uint32_t e : a.experts) put_u32(out, e);
    return out;
}

AssignPayload decode_assign(std::span<const uint8_t> p) {
    Reader r{p, 0};
    AssignPayload a;
    a.node_id = r.u32("node id");
    uint32_t n = r.u32("expert count");
    for (uint32_t i = 0; i < n; ++i) a.experts.push_back(r.u32("expert index"));
    if (r.pos != p.size())
        throw ProtocolError(ProtoError::MalformedPayload, "trailing bytes in ASSIGN");
    return a;
}

void write_checkpoint(const std::string& path, const ModelParams& params, uint64_t round) {
    std::vector<uint8_t> payload = encode_blocks(model_to_blocks(params));
    std::vector<uint8_t> trailer;
    put_u64(trailer, round);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    f.write(reinterpret_cast<const char*>(trailer.data()), 8);
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

std::pair<std::vector<NamedBlock>, uint64_t> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 8)
        throw ProtocolError(ProtoError::Truncated, "checkpoint shorter than round trailer");
    uint64_t round = 0;
    for (int i = 0; i < 8; ++i)
        round |= static_cast<uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
    bytes.resize(bytes.size() - 8);
    return {decode_blocks(bytes), round};
}

}  // namespace spes
