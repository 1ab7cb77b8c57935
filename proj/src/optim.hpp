#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace polydet::nn {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named trainable parameters plus their optimizer state. Iteration order is
// lexicographic by name, which keeps both updates and checkpoints stable.
class ParameterStore {
 public:
  Tensor create(const std::string& name, std::vector<int> shape,
                std::vector<double> values);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<std::string> names() const;
  size_t size() const { return entries_.size(); }
  size_t total_elements() const;

  void zero_grads();
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);

  // Decoupled weight-decay adaptive-moment update. Requires every parameter
  // to have a populated gradient; increments per-parameter step counts and
  // zeroes gradients afterwards.
  void adamw_step(const AdamWConfig& cfg);

 private:
  struct Entry {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
    int64_t step = 0;
  };
  std::map<std::string, Entry> entries_;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_pass = false;
  double worst_error = 0.0;
};

// Compares analytic gradients of loss_fn against central finite differences
// for every parameter element. loss_fn must rebuild the graph from current
// parameter values on each call and be deterministic.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterStore& params, double step = 1e-5,
                           double tolerance = 1e-4);

}  // namespace polydet::nn
