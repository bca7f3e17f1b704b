#pragma once

#include <cstdint>
#include <string>

namespace ditair {

// Plain SHA-1 over a byte buffer, hex-encoded.
std::string sha1_hex(const uint8_t* data, size_t len);
std::string sha1_hex(const std::string& s);

// Git-blob style content hash: sha1("blob <len>\0" + content).
std::string git_blob_sha1(const std::string& content);

// Hashes a file's contents git-blob style. Throws ConfigError if unreadable.
std::string git_blob_sha1_file(const std::string& path);

}  // namespace ditair
