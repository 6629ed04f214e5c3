#include "illusign/hashing.hpp"

#include "illusign/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <openssl/evp.h>

namespace illusign {

struct Sha256::Impl {
    EVP_MD_CTX* ctx = nullptr;
    bool finished = false;
};

Sha256::Sha256() : m_impl(std::make_unique<Impl>()) {
    m_impl->ctx = EVP_MD_CTX_new();
    if (m_impl->ctx == nullptr || EVP_DigestInit_ex(m_impl->ctx, EVP_sha256(), nullptr) != 1) {
        throw IoError("failed to initialise SHA-256 context");
    }
}

Sha256::~Sha256() {
    EVP_MD_CTX_free(m_impl->ctx);
}

Sha256& Sha256::update(std::span<const std::uint8_t> bytes) {
    if (m_impl->finished) {
        throw ContractError("SHA-256 hasher already finalised");
    }
    EVP_DigestUpdate(m_impl->ctx, bytes.data(), bytes.size());
    return *this;
}

Sha256& Sha256::update(std::string_view text) {
    return update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Sha256& Sha256::update_floats(std::span<const float> values) {
    static_assert(std::endian::native == std::endian::little, "float hashing assumes little-endian");
    return update(std::span(reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()));
}

Sha256& Sha256::update_u64(std::uint64_t value) {
    std::array<std::uint8_t, 8> bytes{};
    for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<std::uint8_t>(value >> (8 * i));
    }
    return update(bytes);
}

std::string Sha256::hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    EVP_DigestFinal_ex(m_impl->ctx, digest.data(), &length);
    m_impl->finished = true;
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(length * 2);
    for (unsigned int i = 0; i < length; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    return Sha256().update(bytes).hex();
}

std::string sha256_hex(std::string_view text) {
    return Sha256().update(text).hex();
}

namespace {

void hash_file_into(Sha256& hasher, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> buffer(1 << 16);
    while (in) {
        in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
        const auto got = static_cast<std::size_t>(in.gcount());
        if (got > 0) {
            hasher.update(std::span(buffer.data(), got));
        }
    }
}

} // namespace

std::string sha256_file(const std::filesystem::path& path) {
    Sha256 hasher;
    hash_file_into(hasher, path);
    return hasher.hex();
}

std::string sha256_tree(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(path)) {
        return sha256_file(path);
    }
    if (!fs::is_directory(path)) {
        throw IoError("no such file or directory: " + path.string());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
        if (entry.is_regular_file()) {
            files.push_back(fs::relative(entry.path(), path));
        }
    }
    std::sort(files.begin(), files.end());
    Sha256 hasher;
    for (const auto& rel : files) {
        const std::string name = rel.generic_string();
        hasher.update_u64(name.size());
        hasher.update(name);
        hasher.update(sha256_file(path / rel));
    }
    return hasher.hex();
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) {
        throw ContractError("base64 input length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(3 * (text.size() / 4));
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) {
        throw ContractError("malformed base64 input");
    }
    // EVP_DecodeBlock counts padding as zero bytes.
    std::size_t pad = 0;
    for (std::size_t i = text.size(); i > 0 && text[i - 1] == '=' && pad < 2; --i) {
        ++pad;
    }
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

} // namespace illusign
