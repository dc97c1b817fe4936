#include "lethe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "lethe/error.hpp"

namespace lethe {

namespace {

constexpr char kMagic[4] = {'L', 'E', 'T', 'H'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  std::uint64_t take(int n, const char* what) {
    if (pos + static_cast<std::size_t>(n) > bytes.size()) throw FormatError("checkpoint", std::string("truncated ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes[pos + i])} << (8 * i);
    pos += static_cast<std::size_t>(n);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(take(4, what)); }
  double f64(const char* what) { return std::bit_cast<double>(take(8, what)); }
};

}  // namespace

std::string encode_checkpoint(const nn::ModelParams& params) {
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& layer : params.layers) {
    put_u32(out, static_cast<std::uint32_t>(layer.weight.rows));
    put_u32(out, static_cast<std::uint32_t>(layer.weight.cols));
  }
  for (const auto& layer : params.layers) {
    for (double w : layer.weight.data) put_f64(out, w);
    for (double b : layer.bias) put_f64(out, b);
  }
  return out;
}

nn::ModelParams decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint", "missing LETH magic");
  Reader r{bytes, 4};
  const std::uint32_t version = r.u32("header");
  if (version != kVersion) throw FormatError("checkpoint", "unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("header");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint32_t rows = r.u32("shape table");
    const std::uint32_t cols = r.u32("shape table");
    shapes.emplace_back(rows, cols);
  }
  nn::ModelParams params;
  for (const auto& [rows, cols] : shapes) {
    nn::LayerParams layer{Matrix(rows, cols), std::vector<double>(cols)};
    for (double& w : layer.weight.data) w = r.f64("weights");
    for (double& b : layer.bias) b = r.f64("weights");
    params.layers.push_back(std::move(layer));
  }
  if (r.pos != bytes.size()) throw FormatError("checkpoint", "trailing bytes");
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const nn::ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint", "cannot write " + path.string());
  const std::string bytes = encode_checkpoint(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

nn::ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint", "cannot open " + path.string());
  return decode_checkpoint(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
}

}  // namespace lethe
