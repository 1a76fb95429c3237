#include <gtest/gtest.h>

#include <filesystem>

#include "pnlab/checkpoint.hpp"
#include "pnlab/model.hpp"
#include "testutil.hpp"

namespace pnlab {
namespace {

Model sample_model() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.n_heads = 2;
    cfg.vocab_size = 30;
    cfg.max_seq = 10;
    cfg.seed = 99;
    Model m = Model::init(cfg);
    m.trained_epochs = 7;
    m.edit_mask.at(0, 3) = 0.0;
    m.edit_mask.at(1, 15) = 0.0;
    return m;
}

TEST(Checkpoint, RoundTripIsBitwiseLossless) {
    Model m = sample_model();
    const std::string bytes = serialize_checkpoint(m);
    Model back = deserialize_checkpoint(bytes);
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(back.trained_epochs, m.trained_epochs);
    ASSERT_EQ(back.params.size(), m.params.size());
    for (size_t i = 0; i < m.params.size(); ++i) {
        EXPECT_EQ(back.params[i].first, m.params[i].first);
        EXPECT_TRUE(back.params[i].second.same_bits(m.params[i].second));
    }
    EXPECT_TRUE(back.edit_mask.same_bits(m.edit_mask));
    EXPECT_EQ(serialize_checkpoint(back), bytes);  // save→load→save identical
    EXPECT_EQ(back.checksum(), m.checksum());
}

TEST(Checkpoint, FileRoundTrip) {
    auto dir = testing::make_temp_dir("ckpt");
    const std::string path = (dir / "model.ckpt").string();
    Model m = sample_model();
    save_checkpoint(m, path);
    Model back = load_checkpoint(path);
    EXPECT_EQ(back.checksum(), m.checksum());
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsGarbage) {
    EXPECT_THROW(deserialize_checkpoint("definitely not a checkpoint"), std::runtime_error);
    EXPECT_THROW(deserialize_checkpoint(""), std::runtime_error);
}

TEST(Checkpoint, RejectsTruncation) {
    const std::string bytes = serialize_checkpoint(sample_model());
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), std::runtime_error);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), std::runtime_error);
}

TEST(Checkpoint, RejectsBitFlip) {
    std::string bytes = serialize_checkpoint(sample_model());
    bytes[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(deserialize_checkpoint(bytes), std::runtime_error);
}

TEST(Checkpoint, RejectsVersionMismatch) {
    std::string bytes = serialize_checkpoint(sample_model());
    // bump the version field and re-stamp the checksum so only the version is wrong
    bytes[8] = 2;
    std::string body = bytes.substr(0, bytes.size() - sizeof(uint64_t));
    bytes = body;
    append_raw<uint64_t>(bytes, fnv1a64(body.data(), body.size()));
    try {
        deserialize_checkpoint(bytes);
        FAIL() << "expected version error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

}  // namespace
}  // namespace pnlab
