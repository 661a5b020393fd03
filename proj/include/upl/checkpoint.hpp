// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint byte layout (all integers and floats little-endian):
//
//   "UPLC"                          4 bytes magic
//   u16 version                     currently 1
//   --- body (covered by the CRC) ---
//   u32 levels, u32 base_channels, u32 kernel, u32 in_channels, f32 dropout_rate
//   u32 classes, u32 heads, u8 dropout_gates
//   f32 bn_eps, f32 bn_momentum
//   u32 epoch, u64 seed, u64 adam_step, f32 score
//   u32 entry_count
//   entry_count x { u32 name_len, name (utf-8), u32 rank, rank x u32 dim, f32 payload[prod(dims)] }
//   --- end of body ---
//   u32 crc32(body)
//
// Entries hold every trainable tensor (by parameter name), batch-norm running
// statistics ("<bn>.mean", "<bn>.var", "<bn>.has_stats") and Adam moments
// ("adam.m/<param>", "adam.v/<param>").

#pragma once

#include <map>
#include <string>
#include <vector>

#include "upl/binary_io.hpp"
#include "upl/model.hpp"
#include "upl/optim.hpp"

namespace upl {

inline constexpr char kCheckpointMagic[4] = {'U', 'P', 'L', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint32_t epoch = 0;
    std::uint64_t seed = 0;
    float score = 0.0f;  // validation Dice of the saved weights

    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
    SegModel model;
    AdamState optimizer;
    CheckpointMeta meta;
};

namespace detail {

struct Entry {
    Shape shape;
    std::vector<float> values;
};

inline void write_entry(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const float> v) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (float f : v) w.f32(f);
}

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_save(SegModel& model, const AdamState* optimizer, const CheckpointMeta& meta) {
    ByteWriter body;
    const auto& a = model.arch();
    body.u32(static_cast<std::uint32_t>(a.levels));
    body.u32(static_cast<std::uint32_t>(a.base_channels));
    body.u32(static_cast<std::uint32_t>(a.kernel));
    body.u32(static_cast<std::uint32_t>(a.in_channels));
    body.f32(a.dropout_rate);
    body.u32(static_cast<std::uint32_t>(model.classes()));
    body.u32(static_cast<std::uint32_t>(model.head_count()));
    body.u8(model.dropout_gates() ? 1 : 0);
    auto bns = model.bn_layers();
    body.f32(bns.front().state->eps);
    body.f32(bns.front().state->momentum);
    body.u32(meta.epoch);
    body.u64(meta.seed);
    body.u64(optimizer ? optimizer->step : 0);
    body.f32(meta.score);

    const auto params = model.parameters();
    std::uint32_t count = static_cast<std::uint32_t>(params.size() + 3 * bns.size());
    if (optimizer) count += static_cast<std::uint32_t>(2 * optimizer->moments.size());
    body.u32(count);
    for (const auto& p : params) detail::write_entry(body, p.name, p.tensor.shape(), p.tensor.data());
    for (const auto& b : bns) {
        const Shape s{b.state->channels()};
        detail::write_entry(body, b.name + ".mean", s, b.state->running_mean);
        detail::write_entry(body, b.name + ".var", s, b.state->running_var);
        const float flag = b.state->has_stats ? 1.0f : 0.0f;
        detail::write_entry(body, b.name + ".has_stats", Shape{1}, std::span<const float>(&flag, 1));
    }
    if (optimizer) {
        for (const auto& [name, mom] : optimizer->moments) {
            const Shape s{static_cast<int>(mom.m.size())};
            detail::write_entry(body, "adam.m/" + name, s, mom.m);
            detail::write_entry(body, "adam.v/" + name, s, mom.v);
        }
    }

    ByteWriter out;
    out.bytes(kCheckpointMagic, 4);
    out.u16(kCheckpointVersion);
    out.bytes(body.buffer().data(), body.size());
    out.u32(crc32_of(body.buffer().data(), body.size()));
    return out.take();
}

/// Parses and validates a checkpoint. Throws FormatError on bad magic or
/// version, truncation, CRC mismatch, or entries disagreeing with the
/// declared architecture.
inline Checkpoint checkpoint_load(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 + 2 + 4) throw FormatError("checkpoint too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic");
    ByteReader hdr(bytes.data() + 4, 2);
    const std::uint16_t version = hdr.u16();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));

    const std::uint8_t* body_ptr = bytes.data() + 6;
    const std::size_t body_len = bytes.size() - 6 - 4;
    ByteReader crc_reader(bytes.data() + bytes.size() - 4, 4);
    const std::uint32_t stored_crc = crc_reader.u32();

    ByteReader r(body_ptr, body_len);
    ArchConfig arch;
    arch.levels = static_cast<int>(r.u32());
    arch.base_channels = static_cast<int>(r.u32());
    arch.kernel = static_cast<int>(r.u32());
    arch.in_channels = static_cast<int>(r.u32());
    arch.dropout_rate = r.f32();
    const int classes = static_cast<int>(r.u32());
    const int heads = static_cast<int>(r.u32());
    const bool gates = r.u8() != 0;
    const float eps = r.f32();
    const float momentum = r.f32();
    Checkpoint ck;
    ck.meta.epoch = r.u32();
    ck.meta.seed = r.u64();
    ck.optimizer.step = r.u64();
    ck.meta.score = r.f32();
    const std::uint32_t count = r.u32();

    if (arch.levels < 1 || arch.levels > 8 || arch.base_channels < 2 || arch.base_channels > 1024 || arch.kernel > 15 ||
        classes < 2 || classes > 255 || heads < 1 || heads > kMaxHeads) {
        throw FormatError("checkpoint header declares an invalid architecture");
    }
    try {
        arch.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }

    std::map<std::string, detail::Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw FormatError("entry " + name + " has rank " + std::to_string(rank));
        detail::Entry e;
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32();
            if (dim > (1u << 24)) throw FormatError("entry " + name + " has an implausible extent");
            e.shape.push_back(static_cast<int>(dim));
            n *= dim;
        }
        if (n * 4 > r.remaining()) throw FormatError("truncated stream in entry " + name);
        e.values.resize(n);
        r.floats(e.values.data(), n);
        if (!entries.emplace(std::move(name), std::move(e)).second) throw FormatError("duplicate checkpoint entry");
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint entries");
    if (crc32_of(body_ptr, body_len) != stored_crc) throw FormatError("checkpoint CRC mismatch");

    SeededRng dummy(0);
    SegModel single = SegModel::create(arch, classes, dummy);
    SegModel model = heads > 1 || gates ? grow(single, heads) : single;
    model.set_dropout_gates(gates);

    auto take = [&](const std::string& name, const Shape& shape) -> detail::Entry& {
        auto it = entries.find(name);
        if (it == entries.end()) throw FormatError("checkpoint is missing entry " + name);
        if (it->second.shape != shape) {
            throw FormatError("entry " + name + " has shape " + shape_str(it->second.shape) + ", architecture expects " +
                              shape_str(shape));
        }
        return it->second;
    };
    std::size_t used = 0;
    for (auto& p : model.parameters()) {
        auto& e = take(p.name, p.tensor.shape());
        std::copy(e.values.begin(), e.values.end(), p.tensor.mutable_data().begin());
        ++used;
    }
    for (auto& b : model.bn_layers()) {
        const Shape s{b.state->channels()};
        b.state->running_mean = take(b.name + ".mean", s).values;
        b.state->running_var = take(b.name + ".var", s).values;
        b.state->has_stats = take(b.name + ".has_stats", Shape{1}).values[0] != 0.0f;
        b.state->eps = eps;
        b.state->momentum = momentum;
        used += 3;
    }
    for (auto& [name, e] : entries) {
        if (name.rfind("adam.m/", 0) == 0) {
            const std::string pname = name.substr(7);
            auto vit = entries.find("adam.v/" + pname);
            if (vit == entries.end() || vit->second.values.size() != e.values.size()) {
                throw FormatError("unpaired Adam moment for " + pname);
            }
            ck.optimizer.moments[pname] = {e.values, vit->second.values};
            used += 2;
        }
    }
    if (used != entries.size()) throw FormatError("checkpoint has entries not described by its architecture");
    ck.model = std::move(model);
    return ck;
}

}  // namespace upl
