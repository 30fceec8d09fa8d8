#pragma once

#include "dhn/tensor.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dhn {

/// Ordered collection of named trainable tensors.
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  /// Registers a parameter; names must be unique. Returns the stored handle.
  Tensor add(std::string name, Tensor tensor);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index scalar_count() const;

  /// Allocates zeroed gradient buffers for every parameter.
  void zero_grad();

  /// Parameters whose name starts with `prefix`.
  std::vector<Entry> with_prefix(std::string_view prefix) const;

 private:
  std::vector<Entry> entries_;
};

// Checkpoint file layout (all integers and doubles little-endian):
//   magic   8 bytes  "DHNCKPT\0"
//   version u32      currently 1
//   count   u32      number of tensors
//   per tensor:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, extents u64 x rank
//     values   f64 x product(extents)
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
/// Raw contents of a checkpoint file, in file order.
std::vector<ParameterSet::Entry> read_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint values into `params`. Every parameter must be present with
/// a matching shape.
void load_checkpoint(ParameterSet& params, const std::filesystem::path& path);

struct SgdState {
  std::vector<Buffer> velocity;
};

/// v <- momentum * v + grad; p <- p - lr * v; gradients are zeroed afterwards.
/// Throws if a parameter has no gradient buffer.
void sgd_step(ParameterSet& params, double lr, double momentum, SgdState& state);

/// L2 norm of all gradients taken together. When `max_norm` > 0 and the norm
/// exceeds it, every gradient is scaled by max_norm / norm. Returns the norm
/// before scaling.
double clip_grad_norm(ParameterSet& params, double max_norm);

}  // namespace dhn
