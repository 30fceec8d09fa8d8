#include "dhn/parameters.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dhn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Tensor ParameterSet::add(std::string name, Tensor tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  entries_.emplace_back(std::move(name), tensor);
  return tensor;
}

const Tensor& ParameterSet::at(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("unknown parameter: " + std::string(name));
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

Index ParameterSet::scalar_count() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.grad_buffer().setZero();
}

std::vector<ParameterSet::Entry> ParameterSet::with_prefix(std::string_view prefix) const {
  std::vector<Entry> out;
  for (const auto& e : entries_) {
    if (std::string_view(e.first).starts_with(prefix)) out.push_back(e);
  }
  return out;
}

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'H', 'N', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_pod(std::ofstream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::filesystem::path& path) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw std::runtime_error("truncated checkpoint: " + path.string());
  }
  return value;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic.data(), kMagic.size());
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params.entries()) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
    for (Index extent : tensor.shape()) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(extent));
    os.write(reinterpret_cast<const char*>(tensor.values().data()),
             static_cast<std::streamsize>(tensor.numel() * static_cast<Index>(sizeof(double))));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

std::vector<ParameterSet::Entry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto count = read_pod<std::uint32_t>(is, path);
  std::vector<ParameterSet::Entry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(read_pod<std::uint32_t>(is, path), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) {
      throw std::runtime_error("truncated checkpoint: " + path.string());
    }
    Shape shape(read_pod<std::uint32_t>(is, path));
    for (auto& extent : shape) extent = static_cast<Index>(read_pod<std::uint64_t>(is, path));
    Buffer values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * static_cast<Index>(sizeof(double))))) {
      throw std::runtime_error("truncated checkpoint: " + path.string());
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

void load_checkpoint(ParameterSet& params, const std::filesystem::path& path) {
  const auto stored = read_checkpoint(path);
  for (const auto& [name, tensor] : params.entries()) {
    const ParameterSet::Entry* match = nullptr;
    for (const auto& e : stored) {
      if (e.first == name) match = &e;
    }
    if (match == nullptr) throw std::runtime_error("checkpoint " + path.string() + " lacks parameter " + name);
    if (match->second.shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " + shape_str(match->second.shape()) +
                               " vs " + shape_str(tensor.shape()));
    }
    Tensor target = tensor;
    target.mutable_values() = match->second.values();
  }
}

void sgd_step(ParameterSet& params, double lr, double momentum, SgdState& state) {
  if (state.velocity.empty()) {
    for (const auto& e : params.entries()) state.velocity.push_back(Buffer::Zero(e.second.numel()));
  }
  if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd_step: velocity buffers do not match");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, tensor] = params.entries()[i];
    if (!tensor.has_grad()) throw std::invalid_argument("sgd_step: parameter " + name + " has no gradient");
    if (state.velocity[i].size() != tensor.numel()) {
      throw std::invalid_argument("sgd_step: velocity shape mismatch for " + name);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params.entries()[i].second;
    Buffer& v = state.velocity[i];
    v = momentum * v + p.grad();
    p.mutable_values() -= lr * v;
    p.zero_grad();
  }
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, tensor] : params.entries()) {
    if (tensor.has_grad()) sq += tensor.grad().square().sum();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    for (const auto& entry : params.entries()) {
      Tensor t = entry.second;
      if (t.has_grad()) t.grad_buffer() *= max_norm / norm;
    }
  }
  return norm;
}

}  // namespace dhn
