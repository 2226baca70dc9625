#include "kernelvis/optim.hpp"

#include <cmath>

namespace kv {

template <typename T>
Adam<T>::Adam(ParamStore<T>& params, AdamConfig cfg)
    : params_(&params), cfg_(cfg) {
  m_.resize(params.entries().size());
  v_.resize(params.entries().size());
  for (size_t i = 0; i < params.entries().size(); ++i) {
    const size_t n = params.entries()[i].second.size();
    m_[i].assign(n, 0.0);
    v_[i].assign(n, 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  auto& entries = params_->entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    Tensor<T>& p = entries[i].second;
    if (!p.has_grad()) continue;
    const T* g = p.grad();
    T* x = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = double(g[j]);
      if (cfg_.weight_decay != 0.0) gj += cfg_.weight_decay * double(x[j]);
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      x[j] = static_cast<T>(double(x[j]) -
                            cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace kv
