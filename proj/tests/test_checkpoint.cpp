#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "diffattn/checkpoint.hpp"
#include "test_util.hpp"

using namespace diffattn;
namespace fs = std::filesystem;

namespace {

fs::path tmp_path(const std::string& name) {
    return fs::temp_directory_path() / ("diffattn_test_" + name);
}

Checkpoint sample_checkpoint(std::uint64_t seed) {
    Rng rng(seed);
    Checkpoint c;
    c.tensors.emplace("zeta.w", Tensor::randn({3, 5}, rng));
    c.tensors.emplace("alpha.b", Tensor::randn({7}, rng));
    c.tensors.emplace("mid.scale", Tensor::scalar(2.5f));
    c.metadata = {{"step", 42}, {"note", "sample"}};
    return c;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesTensorsAndMetadata) {
    auto path = tmp_path("roundtrip.ckpt");
    auto c = sample_checkpoint(1);
    ckpt::save(path, c);
    auto loaded = ckpt::load(path);
    ASSERT_EQ(loaded.tensors.size(), c.tensors.size());
    for (const auto& [name, t] : c.tensors) {
        ASSERT_TRUE(loaded.tensors.count(name)) << name;
        EXPECT_EQ(loaded.tensors.at(name).shape(), t.shape());
        EXPECT_EQ(loaded.tensors.at(name).data(), t.data());  // bit-exact
    }
    EXPECT_EQ(loaded.metadata.at("step").get<int>(), 42);
    EXPECT_EQ(loaded.metadata.at("note").get<std::string>(), "sample");
    fs::remove(path);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    auto p1 = tmp_path("bytes1.ckpt"), p2 = tmp_path("bytes2.ckpt");
    ckpt::save(p1, sample_checkpoint(2));
    ckpt::save(p2, ckpt::load(p1));
    EXPECT_EQ(read_bytes(p1), read_bytes(p2));
    fs::remove(p1);
    fs::remove(p2);
}

TEST(Checkpoint, TensorsOrderedByNameInFile) {
    auto path = tmp_path("order.ckpt");
    ckpt::save(path, sample_checkpoint(3));
    const std::string bytes = read_bytes(path);
    // the JSON header lists names sorted: alpha.b < mid.scale < zeta.w
    const auto a = bytes.find("alpha.b"), m = bytes.find("mid.scale"), z = bytes.find("zeta.w");
    ASSERT_NE(a, std::string::npos);
    EXPECT_LT(a, m);
    EXPECT_LT(m, z);
    fs::remove(path);
}

TEST(Checkpoint, MissingFileRaises) {
    EXPECT_THROW(ckpt::load(tmp_path("does_not_exist.ckpt")), CheckpointError);
}

TEST(Checkpoint, GarbageHeaderRaises) {
    auto path = tmp_path("garbage.ckpt");
    {
        std::ofstream out(path, std::ios::binary);
        out << "this is not a checkpoint at all, nope";
    }
    EXPECT_THROW(ckpt::load(path), CheckpointError);
    fs::remove(path);
}

TEST(Checkpoint, TruncatedBlobRaises) {
    auto path = tmp_path("truncated.ckpt");
    ckpt::save(path, sample_checkpoint(4));
    const std::string bytes = read_bytes(path);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    }
    EXPECT_THROW(ckpt::load(path), CheckpointError);
    fs::remove(path);
}

TEST(Checkpoint, CorruptedLengthFieldRaises) {
    auto path = tmp_path("badlen.ckpt");
    ckpt::save(path, sample_checkpoint(5));
    std::string bytes = read_bytes(path);
    bytes[6] = '\x7f';  // blow up the little-endian header length
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    EXPECT_THROW(ckpt::load(path), CheckpointError);
    fs::remove(path);
}

TEST(Checkpoint, NoLeftoverTempFile) {
    auto path = tmp_path("clean.ckpt");
    ckpt::save(path, sample_checkpoint(6));
    EXPECT_TRUE(fs::exists(path));
    EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
    fs::remove(path);
}

TEST(ContentHash, SensitiveToSingleBit) {
    Rng rng(7);
    Tensor t = Tensor::randn({4, 4}, rng);
    const auto h1 = ckpt::content_hash(t);
    EXPECT_EQ(ckpt::content_hash(t), h1);  // deterministic
    t.data()[9] = std::nextafter(t.data()[9], 1e30f);
    EXPECT_NE(ckpt::content_hash(t), h1);
}

TEST(ContentHash, EmptyAndKnownSeedStable) {
    // FNV-1a offset basis for zero bytes
    EXPECT_EQ(ckpt::content_hash(Tensor(Shape{0})), 1469598103934665603ull);
}
