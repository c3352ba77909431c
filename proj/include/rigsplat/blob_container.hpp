#pragma once

#include "rigsplat/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rigsplat {

// Shared on-disk container: a JSON manifest holds a blob table
// [{name, dtype, offset, length, fnv1a}] referencing sections of one sibling
// binary file. Numeric blobs are little-endian float32 / uint32, row-major.
// Both the rig format and Gaussian checkpoints use this container.

class BlobWriter {
public:
    explicit BlobWriter(std::filesystem::path bin_path);

    void add_f32(const std::string& name, std::span<const float> values);
    void add_f32(const std::string& name, std::span<const double> values);  // narrows to f32
    void add_u32(const std::string& name, std::span<const std::uint32_t> values);

    // Writes the binary file and returns the blob table (JSON array).
    nlohmann::json finish();

private:
    void add_bytes(const std::string& name, const std::string& dtype,
                   const std::uint8_t* data, std::size_t n);

    std::filesystem::path bin_path_;
    std::vector<std::uint8_t> buffer_;
    std::vector<std::tuple<std::string, std::string, std::uint64_t, std::uint64_t, std::uint64_t>>
        entries_;  // name, dtype, offset, length, checksum
};

class BlobReader {
public:
    // `table` is the JSON blob table produced by BlobWriter::finish.
    BlobReader(const std::filesystem::path& bin_path, const nlohmann::json& table);

    bool has(const std::string& name) const;
    // expected_count < 0 skips the element-count check. Checksums always verified.
    std::vector<float> read_f32(const std::string& name, std::int64_t expected_count = -1) const;
    std::vector<double> read_f32_as_double(const std::string& name,
                                           std::int64_t expected_count = -1) const;
    std::vector<std::uint32_t> read_u32(const std::string& name,
                                        std::int64_t expected_count = -1) const;

private:
    struct Entry {
        std::string dtype;
        std::uint64_t offset = 0;
        std::uint64_t length = 0;
        std::uint64_t checksum = 0;
    };
    const Entry& find(const std::string& name, const std::string& dtype,
                      std::int64_t expected_count, std::size_t elem_size) const;

    std::vector<std::uint8_t> bytes_;
    std::vector<std::pair<std::string, Entry>> entries_;
};

// Whole-file FNV-1a, used for run-manifest checksums.
std::uint64_t file_checksum(const std::filesystem::path& path);

void write_text_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace rigsplat
