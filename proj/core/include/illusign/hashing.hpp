#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace illusign {

/// Incremental SHA-256 (OpenSSL EVP underneath).
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const std::uint8_t> bytes);
    Sha256& update(std::string_view text);
    Sha256& update_floats(std::span<const float> values);
    Sha256& update_u64(std::uint64_t value);

    /// Lowercase hex digest; the hasher cannot be updated afterwards.
    std::string hex();

private:
    struct Impl;
    std::unique_ptr<Impl> m_impl;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

/// Hash of a file or, for directories, of every regular file (relative path + bytes) in sorted order.
std::string sha256_tree(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws ContractError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

} // namespace illusign
