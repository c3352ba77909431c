#include "rigsplat/blob_container.hpp"
#include "rigsplat/image.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <random>

using namespace rigsplat;

TEST_CASE("blob container round-trips and checksums") {
    test::TempDir dir("blob");
    std::vector<float> floats = {1.5f, -2.25f, 0.0f, 3.0e-7f};
    std::vector<std::uint32_t> ints = {0, 7, 4294967295u};

    BlobWriter writer(dir.path / "data.bin");
    writer.add_f32("f", std::span<const float>(floats));
    writer.add_u32("u", std::span<const std::uint32_t>(ints));
    nlohmann::json table = writer.finish();

    BlobReader reader(dir.path / "data.bin", table);
    CHECK(reader.read_f32("f", 4) == floats);
    CHECK(reader.read_u32("u", 3) == ints);
    CHECK(reader.has("f"));
    CHECK(!reader.has("missing"));
    CHECK_THROWS_AS(reader.read_f32("u"), ContractError);       // dtype mismatch
    CHECK_THROWS_AS(reader.read_f32("f", 5), ContractError);    // count mismatch
    CHECK_THROWS_AS(reader.read_f32("missing"), ContractError);

    // Corrupting the payload must trip the checksum.
    {
        auto bytes = read_text_file(dir.path / "data.bin");
        bytes[0] = static_cast<char>(bytes[0] ^ 0x1);
        write_text_file_atomic(dir.path / "data.bin", bytes);
    }
    BlobReader corrupted(dir.path / "data.bin", table);
    CHECK_THROWS_AS(corrupted.read_f32("f"), ContractError);
}

TEST_CASE("fnv1a matches reference vectors") {
    // Standard FNV-1a 64 test vectors.
    CHECK(fnv1a64(std::string("")) == 14695981039346656037ull);
    CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ull);
}

TEST_CASE("png round-trip preserves 8-bit quantized values") {
    test::TempDir dir("png");
    std::mt19937_64 rng(3);
    Image img(9, 13, 3);
    for (double& v : img.data) v = test::uniform(rng);

    write_png(dir.path / "t.png", img);
    Image back = read_png(dir.path / "t.png");
    REQUIRE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) {
        double quantized = std::lround(img.data[i] * 255.0) / 255.0;
        CHECK(back.data[i] == doctest::Approx(quantized).epsilon(1e-12));
    }

    Image gray(7, 5, 1);
    for (double& v : gray.data) v = test::uniform(rng);
    write_png(dir.path / "g.png", gray);
    Image gback = read_png(dir.path / "g.png");
    REQUIRE(gback.channels == 1);

    write_png_gray16(dir.path / "g16.png", gray);
    Image g16 = read_png(dir.path / "g16.png");
    for (std::size_t i = 0; i < gray.size(); ++i)
        CHECK(g16.data[i] == doctest::Approx(gray.data[i]).epsilon(1e-4));
}

TEST_CASE("identical content produces identical png bytes") {
    test::TempDir dir("pngdet");
    Image img(16, 16, 3);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = (i % 97) / 96.0;
    write_png(dir.path / "a.png", img);
    write_png(dir.path / "b.png", img);
    CHECK(read_text_file(dir.path / "a.png") == read_text_file(dir.path / "b.png"));
}

TEST_CASE("raw float32 dump round-trips") {
    test::TempDir dir("raw");
    Image img(4, 6, 3);
    std::mt19937_64 rng(11);
    for (double& v : img.data) v = test::uniform(rng, -2.0, 2.0);
    write_raw_f32(dir.path / "img.f32", img);
    Image back = read_raw_f32(dir.path / "img.f32", 4, 6, 3);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(back.data[i] == static_cast<double>(static_cast<float>(img.data[i])));
}
