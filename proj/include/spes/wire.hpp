#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spes/model.hpp"

namespace spes {

enum class MsgKind : uint8_t {
    Hello = 0,
    Assign = 1,
    GlobalModel = 2,
    LocalUpdate = 3,
    MergeApplied = 4,
    RoundDone = 5,
    Bye = 6,
};

enum class ProtoError {
    BadMagic,
    BadVersion,
    UnknownKind,
    Truncated,
    LengthMismatch,
    MalformedPayload,
    ConfigMismatch,
    RoundMismatch,
    DuplicatePush,
    NotOwnedBlock,
    UnexpectedMessage,
    BarrierViolation,
    Timeout,
};

class ProtocolError : public std::runtime_error {
public:
    ProtocolError(ProtoError code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    ProtoError code() const { return code_; }

private:
    ProtoError code_;
};

// Framed message: 4-byte magic "SPES", version u8, kind u8, round u32,
// payload_len u64, payload. 18-byte header, little-endian integers.
struct WireMessage {
    uint8_t version = 1;
    MsgKind kind = MsgKind::Bye;
    uint32_t round = 0;
    std::vector<uint8_t> payload;

    size_t wire_size() const { return 18 + payload.size(); }
};

inline constexpr size_t kHeaderBytes = 18;
inline constexpr uint8_t kMagic[4] = {0x53, 0x50, 0x45, 0x53};
inline constexpr uint8_t kWireVersion = 1;

std::vector<uint8_t> encode_message(const WireMessage& msg);
WireMessage decode_message(std::span<const uint8_t> bytes);

// ---- tensor block payload ----
// block count u32; per block: name_len u16 + name, dtype u8 (0 = f32),
// rank u8 + dims u32[], raw little-endian values.

struct NamedBlock {
    std::string name;
    Tensor tensor;
};

std::vector<uint8_t> encode_blocks(const std::vector<NamedBlock>& blocks);
std::vector<NamedBlock> decode_blocks(std::span<const uint8_t> payload);

// Model <-> block list (all blocks, in enumerate_blocks order).
std::vector<NamedBlock> model_to_blocks(const ModelParams& params);
void blocks_into_model(ModelParams& params, const std::vector<NamedBlock>& blocks);

// ---- small fixed payloads ----

struct HelloPayload {
    uint32_t node_id = 0;
    uint64_t config_hash = 0;
};
std::vector<uint8_t> encode_hello(const HelloPayload& h);
HelloPayload decode_hello(std::span<const uint8_t> p);

struct AssignPayload {
    uint32_t node_id = 0;
    std::vector<uint32_t> experts;
};
std::vector<uint8_t> encode_assign(const AssignPayload& a);
AssignPayload decode_assign(std::span<const uint8_t> p);

// Checkpoint file: GLOBAL_MODEL payload followed by an 8-byte round trailer.
void write_checkpoint(const std::string& path, const ModelParams& params, uint64_t round);
std::pair<std::vector<NamedBlock>, uint64_t> read_checkpoint(const std::string& path);

}  // namespace spes
