#include "optim.hpp"

#include <cmath>

#include "errors.hpp"

namespace polydet::nn {

Tensor ParameterStore::create(const std::string& name, std::vector<int> shape,
                              std::vector<double> values) {
  if (entries_.count(name))
    throw UsageError("parameter '" + name + "' already exists");
  Tensor t = Tensor::variable(std::move(shape), std::move(values));
  Entry e;
  e.param = t;
  e.m.assign(t.numel(), 0.0);
  e.v.assign(t.numel(), 0.0);
  entries_.emplace(name, std::move(e));
  return t;
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second.param;
}

bool ParameterStore::has(const std::string& name) const {
  return entries_.count(name) > 0;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

size_t ParameterStore::total_elements() const {
  size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.param.numel();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& [_, e] : entries_) e.param.zero_grad();
}

void ParameterStore::for_each(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (auto& [name, e] : entries_) fn(name, e.param);
}

void ParameterStore::adamw_step(const AdamWConfig& cfg) {
  for (auto& [name, e] : entries_) {
    if (!e.param.has_grad())
      throw NumericError("optimizer step: parameter '" + name + "' has no gradient");
  }
  for (auto& [name, e] : entries_) {
    e.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
    auto& theta = e.param.values_mut();
    const auto& g = e.param.grad();
    for (size_t i = 0; i < theta.size(); ++i) {
      theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = e.m[i] / bc1;
      double vhat = e.v[i] / bc2;
      theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    e.param.zero_grad();
  }
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterStore& params, double step, double tolerance) {
  if (!(step > 0.0 && step <= 1e-3))
    throw NumericError("grad_check: step must be in (0, 1e-3]");

  params.zero_grads();
  Tensor loss = loss_fn();
  backward(loss);

  // Relative error with a small-magnitude guard: tiny absolute differences
  // are floating-point noise, not wrong gradient rules.
  auto rel_error = [](double a, double n) {
    double diff = std::abs(a - n);
    if (diff < 1e-9) return 0.0;
    return diff / std::max(std::abs(a), std::abs(n));
  };

  GradCheckReport report;
  report.all_pass = true;
  params.for_each([&](const std::string& name, Tensor& p) {
    GradCheckEntry entry;
    entry.name = name;
    std::vector<double> analytic = p.grad();
    auto& theta = p.values_mut();
    for (size_t i = 0; i < theta.size(); ++i) {
      double orig = theta[i];
      theta[i] = orig + step;
      double up = loss_fn().scalar();
      theta[i] = orig - step;
      double down = loss_fn().scalar();
      theta[i] = orig;
      double numeric = (up - down) / (2.0 * step);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        entry.finite = false;
        continue;
      }
      entry.max_rel_error = std::max(entry.max_rel_error, rel_error(analytic[i], numeric));
    }
    entry.pass = entry.finite && entry.max_rel_error < tolerance;
    if (!entry.pass) report.all_pass = false;
    report.worst_error = std::max(report.worst_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  });
  return report;
}

}  // namespace polydet::nn
