#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prolad/errors.hpp"
#include "prolad/tensor.hpp"

namespace prolad {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline void put_bytes(std::ostream& os, std::uint64_t v, int nbytes) {
  char buf[8];
  for (int i = 0; i < nbytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, nbytes);
}

inline std::uint64_t get_bytes(std::istream& is, int nbytes) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), nbytes);
  if (!is) throw IoError("tensor read: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

// ---- PLAD tensor format ----
// magic "PLAD" | version u32=1 | dtype u8 (0 = f64) | rank u8 |
// dims u64[rank] | payload f64[numel], all little-endian.

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("PLAD", 4);
  detail::put_bytes(os, 1, 4);                       // version
  detail::put_bytes(os, 0, 1);                       // dtype f64
  detail::put_bytes(os, t.rank(), 1);                // rank
  for (std::size_t d : t.shape()) detail::put_bytes(os, d, 8);
  for (double v : t.data()) detail::put_bytes(os, std::bit_cast<std::uint64_t>(v), 8);
  if (!os) throw IoError("tensor write: stream failure");
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("tensor write: cannot open " + path.string());
  write_tensor(os, t);
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "PLAD") throw IoError("tensor read: bad magic");
  const auto version = detail::get_bytes(is, 4);
  if (version != 1) throw IoError("tensor read: unsupported version " + std::to_string(version));
  const auto dtype = detail::get_bytes(is, 1);
  if (dtype != 0) throw IoError("tensor read: unsupported dtype " + std::to_string(dtype));
  const auto rank = detail::get_bytes(is, 1);
  if (rank > 8) throw IoError("tensor read: rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::get_bytes(is, 8);
    if (d == 0) throw IoError("tensor read: zero dimension");
  }
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = std::bit_cast<double>(detail::get_bytes(is, 8));
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("tensor read: cannot open " + path.string());
  return read_tensor(is);
}

// ---- checkpoints ----
// A checkpoint is a directory of PLAD files plus manifest.json recording the
// logical tensor names (which may contain '/'), shapes, and hyperparameters.

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  ordered_json meta;
};

inline std::string sanitize_tensor_name(const std::string& name) {
  std::string s = name;
  for (char& c : s) {
    if (c == '/' || c == '\\' || c == ':') c = '_';
  }
  return s;
}

inline void save_checkpoint(const std::filesystem::path& dir,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            const ordered_json& meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("checkpoint save: cannot create " + dir.string() + ": " + ec.message());
  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["tensors"] = ordered_json::array();
  for (const auto& [name, t] : tensors) {
    const std::string file = sanitize_tensor_name(name) + ".plad";
    write_tensor(dir / file, t);
    ordered_json entry;
    entry["name"] = name;
    entry["file"] = file;
    entry["shape"] = t.shape();
    manifest["tensors"].push_back(entry);
  }
  manifest["meta"] = meta;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("checkpoint save: cannot open manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("checkpoint load: no manifest in " + dir.string());
  ordered_json manifest;
  try {
    is >> manifest;
  } catch (const std::exception& e) {
    throw IoError("checkpoint load: bad manifest: " + std::string(e.what()));
  }
  Checkpoint ck;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string file = entry.at("file").get<std::string>();
    Tensor t = read_tensor(dir / file);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (t.shape() != Shape(shape.begin(), shape.end())) {
      throw IoError("checkpoint load: shape mismatch for " + name);
    }
    ck.tensors.emplace(name, std::move(t));
  }
  if (manifest.contains("meta")) ck.meta = manifest.at("meta");
  return ck;
}

}  // namespace prolad
