#pragma once

#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "despk/io_util.hpp"
#include "despk/nn.hpp"

namespace despk {

// Model file layout:
//   8-byte magic "DSPKNN1\0"
//   text header:  "tensors <N>\n" then one "<name> <rows> <cols> <act>\n"
//                 per tensor, then "end\n"
//   payload:      tensors as little-endian float64, row-major, header order
//   trailer:      FNV-1a 64 checksum of the payload, little-endian

inline constexpr char kModelMagic[8] = {'D', 'S', 'P', 'K', 'N', 'N', '1', '\0'};

namespace detail {

struct TensorRef {
  std::string name;
  int rows = 0, cols = 0;
  std::string act;
  const std::vector<double>* data = nullptr;
};

inline void collect_tensors(const Stack& s, const std::string& prefix,
                            std::vector<TensorRef>& out) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const DenseLayer& l = s.layers[i];
    std::string base = prefix + "." + std::to_string(i);
    out.push_back({base + ".w", l.in, l.out, activation_name(l.act), &l.w.v});
    out.push_back({base + ".b", 1, l.out, activation_name(l.act), &l.b});
  }
}

inline void append_le_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_le_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string model_to_bytes(const Model& m) {
  std::vector<detail::TensorRef> tensors;
  detail::collect_tensors(m.encoder, "encoder", tensors);
  detail::collect_tensors(m.cond_head, "cond", tensors);
  detail::collect_tensors(m.spk_head, "spk", tensors);

  std::string out(kModelMagic, sizeof kModelMagic);
  out += "tensors " + std::to_string(tensors.size()) + "\n";
  for (const auto& t : tensors)
    out += t.name + " " + std::to_string(t.rows) + " " + std::to_string(t.cols) + " " +
           t.act + "\n";
  out += "end\n";

  std::string payload;
  for (const auto& t : tensors)
    for (double x : *t.data) append_le64(payload, x);
  out += payload;
  detail::append_le_u64(out, fnv1a64(payload.data(), payload.size()));
  return out;
}

inline Model model_from_bytes(const std::string& bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) -> std::runtime_error {
    return std::runtime_error("model file " + origin + ": " + why);
  };
  if (bytes.size() < sizeof kModelMagic || std::memcmp(bytes.data(), kModelMagic, sizeof kModelMagic) != 0)
    throw fail("bad magic (not a despeaker model)");

  std::size_t pos = sizeof kModelMagic;
  auto read_line = [&]() -> std::string {
    std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw fail("truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  std::string first = read_line();
  std::istringstream fs(first);
  std::string word;
  std::size_t n_tensors = 0;
  if (!(fs >> word >> n_tensors) || word != "tensors")
    throw fail("malformed header line '" + first + "'");

  struct Entry {
    std::string name;
    int rows, cols;
    std::string act;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    std::istringstream ls(read_line());
    Entry e;
    if (!(ls >> e.name >> e.rows >> e.cols >> e.act) || e.rows <= 0 || e.cols <= 0)
      throw fail("malformed tensor entry " + std::to_string(i));
    entries.push_back(std::move(e));
  }
  if (read_line() != "end") throw fail("missing header terminator");

  const std::size_t payload_start = pos;
  Model m;
  auto read_tensor = [&](const Entry& e) {
    std::vector<double> v(static_cast<std::size_t>(e.rows) * e.cols);
    const std::size_t need = v.size() * 8;
    if (pos + need > bytes.size())
      throw fail("truncated payload while reading tensor '" + e.name + "'");
    for (auto& x : v) {
      std::uint64_t bits = detail::read_le_u64(
          reinterpret_cast<const unsigned char*>(bytes.data() + pos));
      std::memcpy(&x, &bits, sizeof x);
      pos += 8;
    }
    return v;
  };

  std::size_t idx = 0;
  auto read_stack = [&](const std::string& prefix) {
    Stack s;
    while (idx < entries.size() && entries[idx].name.rfind(prefix + ".", 0) == 0) {
      const Entry& we = entries[idx];
      std::string expect_w = prefix + "." + std::to_string(s.layers.size()) + ".w";
      std::string expect_b = prefix + "." + std::to_string(s.layers.size()) + ".b";
      if (we.name != expect_w)
        throw fail("unexpected tensor '" + we.name + "' (expected '" + expect_w + "')");
      if (idx + 1 >= entries.size() || entries[idx + 1].name != expect_b)
        throw fail("missing bias tensor '" + expect_b + "'");
      const Entry& be = entries[idx + 1];
      if (be.rows != 1 || be.cols != we.cols)
        throw fail("bias shape mismatch for '" + be.name + "'");
      DenseLayer l;
      l.in = we.rows;
      l.out = we.cols;
      l.act = activation_from_name(we.act);
      l.w = Mat(l.in, l.out);
      l.w.v = read_tensor(we);
      l.b = read_tensor(be);
      s.layers.push_back(std::move(l));
      idx += 2;
    }
    if (s.layers.empty()) throw fail("no tensors for block '" + prefix + "'");
    s.validate();
    return s;
  };

  m.encoder = read_stack("encoder");
  m.cond_head = read_stack("cond");
  m.spk_head = read_stack("spk");
  if (idx != entries.size()) throw fail("unrecognized trailing tensor '" + entries[idx].name + "'");
  if (m.encoder.output_dim() != m.cond_head.input_dim() ||
      m.encoder.output_dim() != m.spk_head.input_dim())
    throw fail("embedding dimension mismatch between blocks");

  if (pos + 8 > bytes.size()) throw fail("missing checksum trailer");
  std::uint64_t stored = detail::read_le_u64(
      reinterpret_cast<const unsigned char*>(bytes.data() + pos));
  std::uint64_t actual = fnv1a64(bytes.data() + payload_start, pos - payload_start);
  if (stored != actual) throw fail("payload checksum mismatch");
  if (pos + 8 != bytes.size()) throw fail("trailing garbage after checksum");
  return m;
}

inline void save_model(const Model& m, const std::string& path) {
  write_text_file(path, model_to_bytes(m));
}

inline Model load_model(const std::string& path) {
  return model_from_bytes(read_text_file(path), path);
}

}  // namespace despk
