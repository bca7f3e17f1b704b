#include "ditair/sha1.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "ditair/common.hpp"

namespace ditair {

namespace {

inline uint32_t rotl(uint32_t x, int n) { return (x << n) | (x >> (32 - n)); }

struct Sha1 {
    uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
    uint64_t total = 0;
    uint8_t block[64];
    size_t fill = 0;

    void process(const uint8_t* p) {
        uint32_t w[80];
        for (int i = 0; i < 16; ++i) {
            w[i] = (uint32_t(p[4 * i]) << 24) | (uint32_t(p[4 * i + 1]) << 16) |
                   (uint32_t(p[4 * i + 2]) << 8) | uint32_t(p[4 * i + 3]);
        }
        for (int i = 16; i < 80; ++i)
            w[i] = rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
        uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
        for (int i = 0; i < 80; ++i) {
            uint32_t f, k;
            if (i < 20) { f = (b & c) | (~b & d); k = 0x5A827999u; }
            else if (i < 40) { f = b ^ c ^ d; k = 0x6ED9EBA1u; }
            else if (i < 60) { f = (b & c) | (b & d) | (c & d); k = 0x8F1BBCDCu; }
            else { f = b ^ c ^ d; k = 0xCA62C1D6u; }
            uint32_t t = rotl(a, 5) + f + e + k + w[i];
            e = d; d = c; c = rotl(b, 30); b = a; a = t;
        }
        h[0] += a; h[1] += b; h[2] += c; h[3] += d; h[4] += e;
    }

    void update(const uint8_t* data, size_t len) {
        total += len;
        while (len > 0) {
            size_t take = 64 - fill;
            if (take > len) take = len;
            std::memcpy(block + fill, data, take);
            fill += take;
            data += take;
            len -= take;
            if (fill == 64) {
                process(block);
                fill = 0;
            }
        }
    }

    std::string finish() {
        uint64_t bits = total * 8;
        uint8_t pad = 0x80;
        update(&pad, 1);
        uint8_t z = 0;
        while (fill != 56) update(&z, 1);
        uint8_t lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = uint8_t(bits >> (56 - 8 * i));
        update(lenb, 8);
        static const char* hex = "0123456789abcdef";
        std::string out(40, '0');
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 4; ++j) {
                uint8_t byte = uint8_t(h[i] >> (24 - 8 * j));
                out[size_t(8 * i + 2 * j)] = hex[byte >> 4];
                out[size_t(8 * i + 2 * j + 1)] = hex[byte & 0xF];
            }
        }
        return out;
    }
};

}  // namespace

std::string sha1_hex(const uint8_t* data, size_t len) {
    Sha1 s;
    s.update(data, len);
    return s.finish();
}

std::string sha1_hex(const std::string& s) {
    return sha1_hex(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

std::string git_blob_sha1(const std::string& content) {
    std::string header = "blob " + std::to_string(content.size());
    Sha1 s;
    s.update(reinterpret_cast<const uint8_t*>(header.data()), header.size() + 1);
    s.update(reinterpret_cast<const uint8_t*>(content.data()), content.size());
    return s.finish();
}

std::string git_blob_sha1_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read file for hashing: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return git_blob_sha1(buf.str());
}

}  // namespace ditair
