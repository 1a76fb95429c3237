#pragma once

// Versioned binary model container.
//
// Layout:
//   bytes 0..7    magic "PNLCKPT1"
//   u32           format version (currently 1)
//   u32           JSON header length in bytes
//   header        JSON: config, trained_epochs, tensor directory (name+shape,
//                 serialization order), edit-mask shape
//   payload       raw little-endian 64-bit doubles: each tensor in directory
//                 order, then the edit mask
//   u64           fnv-1a checksum of everything before it
//
// Round trips are bitwise lossless: save(load(save(m))) produces identical
// bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "pnlab/io.hpp"
#include "pnlab/model.hpp"
#include "pnlab/tensor.hpp"

namespace pnlab {

inline constexpr char kCheckpointMagic[9] = "PNLCKPT1";
inline constexpr uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Model& model) {
    model.config.validate();
    nlohmann::ordered_json header;
    header["config"] = model.config.to_json();
    header["trained_epochs"] = model.trained_epochs;
    nlohmann::ordered_json dir = nlohmann::ordered_json::array();
    for (const auto& [name, t] : model.params) dir.push_back({{"name", name}, {"shape", t.shape()}});
    header["tensors"] = std::move(dir);
    header["edit_mask_shape"] = model.edit_mask.shape();
    const std::string hj = header.dump();

    std::string out(kCheckpointMagic, 8);
    append_raw<uint32_t>(out, kCheckpointVersion);
    append_raw<uint32_t>(out, static_cast<uint32_t>(hj.size()));
    out += hj;
    for (const auto& [name, t] : model.params)
        out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
    out.append(reinterpret_cast<const char*>(model.edit_mask.data().data()), model.edit_mask.size() * sizeof(double));
    append_raw<uint64_t>(out, fnv1a64(out.data(), out.size()));
    return out;
}

inline Model deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 + sizeof(uint32_t) * 2 + sizeof(uint64_t) || bytes.compare(0, 8, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: not a checkpoint file");
    const uint64_t stored = [&] {
        size_t off = bytes.size() - sizeof(uint64_t);
        return read_raw<uint64_t>(bytes, off);
    }();
    if (fnv1a64(bytes.data(), bytes.size() - sizeof(uint64_t)) != stored)
        throw std::runtime_error("checkpoint: checksum mismatch, file is corrupted");

    size_t off = 8;
    const uint32_t version = read_raw<uint32_t>(bytes, off);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    const uint32_t hlen = read_raw<uint32_t>(bytes, off);
    if (off + hlen > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(off, hlen));
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("checkpoint: malformed header");
    }
    off += hlen;

    Model m;
    m.config = ModelConfig::from_json(header.at("config"));
    m.trained_epochs = header.at("trained_epochs").get<uint64_t>();

    const auto expected = param_names(m.config);
    const auto& dir = header.at("tensors");
    if (dir.size() != expected.size()) throw std::runtime_error("checkpoint: tensor directory does not match geometry");
    for (size_t i = 0; i < dir.size(); ++i) {
        const std::string name = dir[i].at("name").get<std::string>();
        const Shape shape = dir[i].at("shape").get<Shape>();
        if (name != expected[i] || shape != param_shape(m.config, name))
            throw std::runtime_error("checkpoint: tensor directory does not match geometry at " + name);
        const size_t count = numel(shape);
        if (off + count * sizeof(double) > bytes.size()) throw std::runtime_error("checkpoint: truncated payload");
        std::vector<double> data(count);
        std::memcpy(data.data(), bytes.data() + off, count * sizeof(double));
        off += count * sizeof(double);
        m.params.emplace_back(name, Tensor(shape, std::move(data)));
    }
    const Shape mask_shape = header.at("edit_mask_shape").get<Shape>();
    if (mask_shape != Shape{m.config.n_layers, m.config.d_ff})
        throw std::runtime_error("checkpoint: edit mask shape does not match geometry");
    const size_t mcount = numel(mask_shape);
    if (off + mcount * sizeof(double) > bytes.size()) throw std::runtime_error("checkpoint: truncated payload");
    std::vector<double> mdata(mcount);
    std::memcpy(mdata.data(), bytes.data() + off, mcount * sizeof(double));
    off += mcount * sizeof(double);
    m.edit_mask = Tensor(mask_shape, std::move(mdata));
    for (double v : m.edit_mask.data())
        if (v != 0.0 && v != 1.0) throw std::runtime_error("checkpoint: edit mask entries must be 0 or 1");
    if (off + sizeof(uint64_t) != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
    return m;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
    write_file(path, serialize_checkpoint(model));
}

inline Model load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(read_file(path));
}

}  // namespace pnlab
