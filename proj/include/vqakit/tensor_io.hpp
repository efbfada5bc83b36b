#pragma once

// Named-tensor checkpoint container shared by every module.
//
// Layout: magic bytes "AMA1", a little-endian u64 giving the manifest byte
// length, the manifest (UTF-8 JSON: string meta map plus a name/shape/offset
// entry per tensor, sorted by name), then the raw little-endian float32
// payloads back to back. Offsets are relative to the payload start.
// Save -> load -> save round-trips byte-identically.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vqakit/core.hpp"
#include "json.hpp"

namespace vqakit::numkit {

struct TensorFile {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> meta;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("TensorFile: missing tensor '" + name + "'");
    return it->second;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json manifest;
    manifest["meta"] = meta;
    nlohmann::json entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {  // std::map iterates name-sorted
      nlohmann::json e;
      e["name"] = name;
      e["shape"] = t.shape();
      e["offset"] = offset;
      entries.push_back(std::move(e));
      offset += t.numel() * 4;
    }
    manifest["tensors"] = std::move(entries);
    const std::string mtext = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("TensorFile: cannot open for write: " + path.string());
    out.write("AMA1", 4);
    write_u64(out, mtext.size());
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : tensors) write_floats(out, t);
    out.flush();
    if (!out) throw IoError("TensorFile: write failed: " + path.string());
  }

  static TensorFile load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("TensorFile: cannot open: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "AMA1", 4) != 0)
      throw IoError("TensorFile: bad magic in " + path.string());
    const std::uint64_t mlen = read_u64(in, path);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw IoError("TensorFile: truncated manifest in " + path.string());

    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("TensorFile: manifest parse error in " + path.string() + ": " + e.what());
    }

    TensorFile tf;
    if (manifest.contains("meta"))
      tf.meta = manifest["meta"].get<std::map<std::string, std::string>>();
    const std::streampos payload_start = in.tellg();
    for (const auto& e : manifest["tensors"]) {
      const std::string name = e["name"].get<std::string>();
      const std::vector<int> shape = e["shape"].get<std::vector<int>>();
      const std::uint64_t offset = e["offset"].get<std::uint64_t>();
      Tensor t(shape);
      in.seekg(payload_start + static_cast<std::streamoff>(offset));
      read_floats(in, t, path);
      if (!t.all_finite())
        throw IoError("TensorFile: non-finite values in tensor '" + name + "' of " + path.string());
      tf.tensors.emplace(name, std::move(t));
    }
    return tf;
  }

 private:
  static void write_u64(std::ofstream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
  }

  static std::uint64_t read_u64(std::ifstream& in, const std::filesystem::path& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw IoError("TensorFile: truncated header in " + path.string());
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  static void write_floats(std::ofstream& out, const Tensor& t) {
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * 4));
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const float f = t[i];
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        char b[4] = {static_cast<char>(u & 0xFF), static_cast<char>((u >> 8) & 0xFF),
                     static_cast<char>((u >> 16) & 0xFF), static_cast<char>((u >> 24) & 0xFF)};
        out.write(b, 4);
      }
    }
  }

  static void read_floats(std::ifstream& in, Tensor& t, const std::filesystem::path& path) {
    if constexpr (std::endian::native == std::endian::little) {
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        std::uint32_t u = static_cast<std::uint32_t>(b[0]) |
                          (static_cast<std::uint32_t>(b[1]) << 8) |
                          (static_cast<std::uint32_t>(b[2]) << 16) |
                          (static_cast<std::uint32_t>(b[3]) << 24);
        std::memcpy(&t[i], &u, 4);
      }
    }
    if (!in) throw IoError("TensorFile: truncated payload in " + path.string());
  }
};

}  // namespace vqakit::numkit
