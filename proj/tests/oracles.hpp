#pragma once

// Test-side reference implementations. Nothing here reuses the library's
// metric code: the BLEU and CIDEr oracles go straight from the formulas.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ser/tensor.hpp"
#include "ser/rng.hpp"

namespace oracle {

using ser::Tensor;

inline Tensor<double> random_tensor(ser::Shape shape, ser::Rng& rng, double scale = 1.0, bool grad = true) {
  std::vector<double> v(ser::numel_of(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t coords = 0;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
// gradient is ~0 from dividing rounding noise by nothing.
inline double rel_err(double a, double n, double floor = 1e-5) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares backward() against central differences for every coordinate of
/// every tensor in `params`. `loss` rebuilds the scalar from scratch.
inline GradCheck grad_check(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> params,
                            double eps = 1e-5, std::size_t max_coords_per_param = 0, std::uint64_t pick_seed = 1) {
  for (auto& p : params) p.zero_grad();
  const auto l = loss();
  ser::backward(l);
  // Central-difference rounding noise grows with |loss|, so does the floor.
  const double floor = 1e-5 * std::max(1.0, std::abs(l.item()));
  GradCheck out;
  ser::Rng pick(pick_seed);
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> idx(p.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_coords_per_param && idx.size() > max_coords_per_param) {
      pick.shuffle(idx);
      idx.resize(max_coords_per_param);
    }
    auto vals = p.mutable_values();
    for (const std::size_t i : idx) {
      const double keep = vals[i];
      double fp = 0, fm = 0;
      {
        ser::NoGradGuard g;
        vals[i] = keep + eps;
        fp = loss().item();
        vals[i] = keep - eps;
        fm = loss().item();
      }
      vals[i] = keep;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      out.max_rel = std::max(out.max_rel, rel_err(a, numeric, floor));
      ++out.coords;
    }
    p.zero_grad();
  }
  return out;
}

// Upstream weights that turn any tensor into a scalar with a non-trivial
// gradient: sum(out * w).
inline Tensor<double> weighted_sum(const Tensor<double>& out, const std::vector<double>& w) {
  return ser::sum(ser::mul(out, Tensor<double>(out.shape(), w)));
}

inline std::vector<double> random_weights(std::size_t n, ser::Rng& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.normal();
  return w;
}

// Overwrites every parameter with N(0, scale^2) so gradients are far from
// the finite-difference noise floor (init std is tiny).
template <typename Params>
void randomize(const Params& params, ser::Rng& rng, double scale = 0.5) {
  for (auto p : params)
    for (auto& v : p.tensor.mutable_values()) v = rng.normal() * scale;
}

template <typename Params>
std::vector<Tensor<double>> tensors_of(const Params& params) {
  std::vector<Tensor<double>> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

// ---------------------------------------------------------------- metrics

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(w);
  }
  return out;
}

inline std::vector<std::string> grams(const std::vector<std::string>& w, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) {
    std::string g;
    for (std::size_t j = 0; j < n; ++j) g += (j ? "\x1f" : "") + w[i + j];
    out.push_back(g);
  }
  return out;
}

inline double count(const std::vector<std::string>& v, const std::string& g) {
  return static_cast<double>(std::count(v.begin(), v.end(), g));
}

struct Item {
  std::string cand;
  std::vector<std::string> refs;
};

/// Corpus BLEU-4 written as the textbook sums over candidate n-gram types.
inline double bleu(const std::vector<Item>& corpus) {
  double num[4] = {}, den[4] = {}, c = 0, r = 0;
  for (const auto& it : corpus) {
    const auto cw = words(it.cand);
    c += static_cast<double>(cw.size());
    double best = -1;
    for (const auto& ref : it.refs) {
      const double len = static_cast<double>(words(ref).size());
      const double d = std::abs(len - static_cast<double>(cw.size()));
      const double bd = std::abs(best - static_cast<double>(cw.size()));
      if (best < 0 || d < bd || (d == bd && len < best)) best = len;
    }
    r += best;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cg = grams(cw, n);
      const std::set<std::string> types(cg.begin(), cg.end());
      for (const auto& g : types) {
        double mx = 0;
        for (const auto& ref : it.refs) mx = std::max(mx, count(grams(words(ref), n), g));
        num[n - 1] += std::min(count(cg, g), mx);
      }
      den[n - 1] += static_cast<double>(cg.size());
    }
  }
  double logp = 0;
  for (int n = 0; n < 4; ++n) {
    if (num[n] == 0 || den[n] == 0) return 0.0;
    logp += 0.25 * std::log(num[n] / den[n]);
  }
  const double bp = c > r ? 1.0 : std::exp(1 - r / c);
  return bp * std::exp(logp);
}

/// CIDEr-D per image by direct formula: g_k = tf * log(N / max(1, df)),
/// clipped dot product, Gaussian length penalty, sigma 6, times 10; orders
/// where the reference has no n-grams are left out of the average.
inline std::vector<double> cider(const std::vector<Item>& corpus) {
  const double N = static_cast<double>(corpus.size());
  std::vector<std::map<std::string, double>> df(4);
  for (const auto& it : corpus)
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<std::string> s;
      for (const auto& ref : it.refs)
        for (const auto& g : grams(words(ref), n)) s.insert(g);
      for (const auto& g : s) df[n - 1][g] += 1;
    }
  auto vec = [&](const std::vector<std::string>& w, std::size_t n) {
    std::map<std::string, double> v;
    const auto gs = grams(w, n);
    for (const auto& g : gs) {
      const double d = df[n - 1].count(g) ? df[n - 1][g] : 0.0;
      v[g] = count(gs, g) * std::log(N / std::max(1.0, d));
    }
    return v;
  };
  std::vector<double> out;
  for (const auto& it : corpus) {
    const auto cw = words(it.cand);
    double total = 0;
    for (const auto& ref : it.refs) {
      const auto rw = words(ref);
      const double delta = static_cast<double>(cw.size()) - static_cast<double>(rw.size());
      double acc = 0;
      int used = 0;
      for (std::size_t n = 1; n <= 4; ++n) {
        const auto vr = vec(rw, n);
        if (vr.empty()) continue;
        ++used;
        const auto vc = vec(cw, n);
        double dot = 0, nc = 0, nr = 0;
        for (const auto& [g, x] : vc) nc += x * x;
        for (const auto& [g, x] : vr) nr += x * x;
        for (const auto& [g, x] : vc)
          if (vr.count(g)) dot += std::min(x, vr.at(g)) * vr.at(g);
        double sim = dot;
        if (nc > 0 && nr > 0) sim /= std::sqrt(nc) * std::sqrt(nr);
        acc += sim * std::exp(-delta * delta / 72.0);
      }
      if (used) total += acc / used;
    }
    out.push_back(10.0 * total / static_cast<double>(it.refs.size()));
  }
  return out;
}

}  // namespace oracle
