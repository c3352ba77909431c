#include "rigsplat/blob_container.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace rigsplat {

static_assert(std::endian::native == std::endian::little,
              "blob container assumes a little-endian host");

BlobWriter::BlobWriter(std::filesystem::path bin_path) : bin_path_(std::move(bin_path)) {}

void BlobWriter::add_bytes(const std::string& name, const std::string& dtype,
                           const std::uint8_t* data, std::size_t n) {
    std::uint64_t offset = buffer_.size();
    buffer_.insert(buffer_.end(), data, data + n);
    entries_.emplace_back(name, dtype, offset, n, fnv1a64(data, n));
}

void BlobWriter::add_f32(const std::string& name, std::span<const float> values) {
    add_bytes(name, "f32", reinterpret_cast<const std::uint8_t*>(values.data()),
              values.size() * sizeof(float));
}

void BlobWriter::add_f32(const std::string& name, std::span<const double> values) {
    std::vector<float> narrowed(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) narrowed[i] = static_cast<float>(values[i]);
    add_f32(name, std::span<const float>(narrowed));
}

void BlobWriter::add_u32(const std::string& name, std::span<const std::uint32_t> values) {
    add_bytes(name, "u32", reinterpret_cast<const std::uint8_t*>(values.data()),
              values.size() * sizeof(std::uint32_t));
}

nlohmann::json BlobWriter::finish() {
    std::ofstream out(bin_path_, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + bin_path_.string());
    out.write(reinterpret_cast<const char*>(buffer_.data()),
              static_cast<std::streamsize>(buffer_.size()));
    if (!out) throw IoError("write failed: " + bin_path_.string());
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, dtype, offset, length, checksum] : entries_) {
        table.push_back({{"name", name},
                         {"dtype", dtype},
                         {"offset", offset},
                         {"length", length},
                         {"fnv1a", checksum}});
    }
    return table;
}

BlobReader::BlobReader(const std::filesystem::path& bin_path, const nlohmann::json& table) {
    std::ifstream in(bin_path, std::ios::binary);
    if (!in) throw IoError("cannot open blob file: " + bin_path.string());
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (!table.is_array()) throw ContractError("blob table is not an array");
    for (const auto& e : table) {
        Entry entry;
        entry.dtype = e.at("dtype").get<std::string>();
        entry.offset = e.at("offset").get<std::uint64_t>();
        entry.length = e.at("length").get<std::uint64_t>();
        entry.checksum = e.at("fnv1a").get<std::uint64_t>();
        entries_.emplace_back(e.at("name").get<std::string>(), entry);
    }
}

bool BlobReader::has(const std::string& name) const {
    for (const auto& [n, e] : entries_)
        if (n == name) return true;
    return false;
}

const BlobReader::Entry& BlobReader::find(const std::string& name, const std::string& dtype,
                                          std::int64_t expected_count,
                                          std::size_t elem_size) const {
    for (const auto& [n, e] : entries_) {
        if (n != name) continue;
        if (e.dtype != dtype)
            throw ContractError("blob '" + name + "' has dtype " + e.dtype + ", expected " + dtype);
        if (e.offset + e.length > bytes_.size())
            throw ContractError("blob '" + name + "' extends past end of binary file");
        if (e.length % elem_size != 0)
            throw ContractError("blob '" + name + "' length not a multiple of element size");
        if (expected_count >= 0 &&
            e.length != static_cast<std::uint64_t>(expected_count) * elem_size)
            throw ContractError("blob '" + name + "' has " +
                                std::to_string(e.length / elem_size) + " elements, expected " +
                                std::to_string(expected_count));
        if (fnv1a64(bytes_.data() + e.offset, e.length) != e.checksum)
            throw ContractError("blob '" + name + "' checksum mismatch");
        return e;
    }
    throw ContractError("blob '" + name + "' not found");
}

std::vector<float> BlobReader::read_f32(const std::string& name,
                                        std::int64_t expected_count) const {
    const Entry& e = find(name, "f32", expected_count, sizeof(float));
    std::vector<float> out(e.length / sizeof(float));
    std::memcpy(out.data(), bytes_.data() + e.offset, e.length);
    return out;
}

std::vector<double> BlobReader::read_f32_as_double(const std::string& name,
                                                   std::int64_t expected_count) const {
    auto f = read_f32(name, expected_count);
    return std::vector<double>(f.begin(), f.end());
}

std::vector<std::uint32_t> BlobReader::read_u32(const std::string& name,
                                                std::int64_t expected_count) const {
    const Entry& e = find(name, "u32", expected_count, sizeof(std::uint32_t));
    std::vector<std::uint32_t> out(e.length / sizeof(std::uint32_t));
    std::memcpy(out.data(), bytes_.data() + e.offset, e.length);
    return out;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path.string());
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

void write_text_file_atomic(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out << content;
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace rigsplat
