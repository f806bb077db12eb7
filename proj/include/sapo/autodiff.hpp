#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sapo/errors.hpp"

namespace sapo::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// softplus(z) = log(1 + e^z), safe for any finite z.
inline double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 - e^g) for g < 0, two-branch form (Maechler).
inline double log1mexp(double g) {
  constexpr double kLn2 = 0.6931471805599453;
  return g > -kLn2 ? std::log(-std::expm1(g)) : std::log1p(-std::exp(g));
}

// Handle into a Tape. Plain index; cheap to copy.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense float64 arrays. One tape per forward pass;
// backward() consumes the recorded operations, after which grads stay
// readable but no further ops may be appended.
class Tape {
 public:
  Var leaf(Shape shape, std::vector<double> value) {
    if (numel(shape) != value.size())
      throw ShapeError("leaf: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(value.size()));
    return push(std::move(shape), std::move(value), nullptr);
  }

  Var scalar(double v) { return leaf({}, {v}); }

  Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    std::vector<double> out = at(a).value;
    const auto& vb = at(b).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(at(a).shape, std::move(out), [a, b](Tape& t, const Node& n) {
      auto& ga = t.at(a).grad;
      auto& gb = t.at(b).grad;
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        ga[i] += n.grad[i];
        gb[i] += n.grad[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    std::vector<double> out = at(a).value;
    const auto& vb = at(b).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(at(a).shape, std::move(out), [a, b](Tape& t, const Node& n) {
      auto& ga = t.at(a).grad;
      auto& gb = t.at(b).grad;
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        ga[i] += n.grad[i];
        gb[i] -= n.grad[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    const auto& va = at(a).value;
    const auto& vb = at(b).value;
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return push(at(a).shape, std::move(out), [a, b](Tape& t, const Node& n) {
      auto& na = t.at(a);
      auto& nb = t.at(b);
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        na.grad[i] += n.grad[i] * nb.value[i];
        nb.grad[i] += n.grad[i] * na.value[i];
      }
    });
  }

  // [m,k] x [k,n] -> [m,n], row-major.
  Var matmul(Var a, Var b) {
    const auto& sa = at(a).shape;
    const auto& sb = at(b).shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
      throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    const int m = sa[0], k = sa[1], n = sb[1];
    const auto& va = at(a).value;
    const auto& vb = at(b).value;
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int l = 0; l < k; ++l) {
        const double ail = va[i * k + l];
        for (int j = 0; j < n; ++j) out[i * n + j] += ail * vb[l * n + j];
      }
    return push({m, n}, std::move(out), [a, b, m, k, n](Tape& t, const Node& nd) {
      auto& na = t.at(a);
      auto& nb = t.at(b);
      // dA = G B^T, dB = A^T G
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += nd.grad[i * n + j] * nb.value[l * n + j];
          na.grad[i * k + l] += acc;
        }
      for (int l = 0; l < k; ++l)
        for (int i = 0; i < m; ++i) {
          const double ail = na.value[i * k + l];
          for (int j = 0; j < n; ++j) nb.grad[l * n + j] += ail * nd.grad[i * n + j];
        }
    });
  }

  // [m,n] + [n], vec added to every row.
  Var add_rowvec(Var mat, Var vec) {
    const auto& sm = at(mat).shape;
    const auto& sv = at(vec).shape;
    if (sm.size() != 2 || sv.size() != 1 || sm[1] != sv[0])
      throw ShapeError("add_rowvec: incompatible shapes " + shape_str(sm) + " and " +
                       shape_str(sv));
    const int m = sm[0], n = sm[1];
    std::vector<double> out = at(mat).value;
    const auto& vv = at(vec).value;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[i * n + j] += vv[j];
    return push(sm, std::move(out), [mat, vec, m, n](Tape& t, const Node& nd) {
      auto& gm = t.at(mat).grad;
      auto& gv = t.at(vec).grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          gm[i * n + j] += nd.grad[i * n + j];
          gv[j] += nd.grad[i * n + j];
        }
    });
  }

  // Embedding lookup: rows of a [R,c] table gathered into [len(rows), c].
  Var gather_rows(Var table, std::vector<int> rows) {
    const auto& st = at(table).shape;
    if (st.size() != 2)
      throw ShapeError("gather_rows: table must be 2-d, got " + shape_str(st));
    const int r = st[0], c = st[1];
    for (int row : rows)
      if (row < 0 || row >= r)
        throw ContractError("gather_rows: row index " + std::to_string(row) +
                            " out of range [0," + std::to_string(r) + ")");
    const auto& vt = at(table).value;
    std::vector<double> out(rows.size() * static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(vt.begin() + static_cast<std::size_t>(rows[i]) * c, c, out.begin() + i * c);
    const int nrows = static_cast<int>(rows.size());
    return push({nrows, c}, std::move(out),
                [table, rows = std::move(rows), c](Tape& t, const Node& nd) {
                  auto& gt = t.at(table).grad;
                  for (std::size_t i = 0; i < rows.size(); ++i)
                    for (int j = 0; j < c; ++j)
                      gt[static_cast<std::size_t>(rows[i]) * c + j] += nd.grad[i * c + j];
                });
  }

  // Same data, new shape; adjoint is the identity.
  Var reshape(Var a, Shape s) {
    if (numel(s) != at(a).value.size())
      throw ShapeError("reshape: " + shape_str(at(a).shape) + " has " +
                       std::to_string(at(a).value.size()) + " elements, target " + shape_str(s));
    return push(std::move(s), at(a).value, [a](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (std::size_t i = 0; i < nd.grad.size(); ++i) ga[i] += nd.grad[i];
    });
  }

  Var tanh(Var a) {
    std::vector<double> out = at(a).value;
    for (double& v : out) v = std::tanh(v);
    return push(at(a).shape, std::move(out), [a](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (std::size_t i = 0; i < nd.grad.size(); ++i)
        ga[i] += nd.grad[i] * (1.0 - nd.value[i] * nd.value[i]);
    });
  }

  // Row-wise log-softmax over the last axis. Accepts [n] or [m,n].
  Var log_softmax(Var a) {
    const auto& sa = at(a).shape;
    if (sa.empty() || sa.size() > 2)
      throw ShapeError("log_softmax: expected 1-d or 2-d input, got " + shape_str(sa));
    const int n = sa.back();
    const int m = sa.size() == 2 ? sa[0] : 1;
    std::vector<double> out = at(a).value;
    for (int i = 0; i < m; ++i) {
      double* row = out.data() + static_cast<std::size_t>(i) * n;
      const double mx = *std::max_element(row, row + n);
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
      const double lz = mx + std::log(z);
      for (int j = 0; j < n; ++j) row[j] -= lz;
    }
    return push(sa, std::move(out), [a, m, n](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += nd.grad[off + j];
        for (int j = 0; j < n; ++j)
          ga[off + j] += nd.grad[off + j] - std::exp(nd.value[off + j]) * gsum;
      }
    });
  }

  Var sum(Var a) {
    double s = 0.0;
    for (double v : at(a).value) s += v;
    return push({}, {s}, [a](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (double& g : ga) g += nd.grad[0];
    });
  }

  Var mean(Var a) {
    const auto& va = at(a).value;
    if (va.empty()) throw ShapeError("mean: empty input");
    double s = 0.0;
    for (double v : va) s += v;
    const double inv = 1.0 / static_cast<double>(va.size());
    return push({}, {s * inv}, [a, inv](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (double& g : ga) g += nd.grad[0] * inv;
    });
  }

  Var scale(Var a, double c) {
    std::vector<double> out = at(a).value;
    for (double& v : out) v *= c;
    return push(at(a).shape, std::move(out), [a, c](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (std::size_t i = 0; i < nd.grad.size(); ++i) ga[i] += c * nd.grad[i];
    });
  }

  Var add_const(Var a, double c) {
    std::vector<double> out = at(a).value;
    for (double& v : out) v += c;
    return push(at(a).shape, std::move(out), [a](Tape& t, const Node& nd) {
      auto& ga = t.at(a).grad;
      for (std::size_t i = 0; i < nd.grad.size(); ++i) ga[i] += nd.grad[i];
    });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  // log sigma(x) = -softplus(-x); d/dx = 1 - sigma(x).
  Var log_sigmoid(Var a) {
    std::vector<double> out = at(a).value;
    for (double& v : out) v = -softplus(-v);
    return push(at(a).shape, std::move(out), [a](Tape& t, const Node& nd) {
      auto& na = t.at(a);
      for (std::size_t i = 0; i < nd.grad.size(); ++i)
        na.grad[i] += nd.grad[i] * (1.0 - sigmoid(na.value[i]));
    });
  }

  // g -> log(e^g / (1 - e^g)) = g - log1mexp(g), for g < 0 strictly.
  // d/dg = 1 / (1 - e^g).
  Var log_odds(Var a) {
    std::vector<double> out = at(a).value;
    for (double& v : out) {
      if (!(v < 0.0))
        throw DomainError("log_odds: log-probability must be < 0, got " + std::to_string(v));
      v = v - log1mexp(v);
    }
    return push(at(a).shape, std::move(out), [a](Tape& t, const Node& nd) {
      auto& na = t.at(a);
      for (std::size_t i = 0; i < nd.grad.size(); ++i)
        na.grad[i] += nd.grad[i] / (-std::expm1(na.value[i]));
    });
  }

  // Fills grad on every node reachable from loss, then drops the recorded
  // operations. Values and grads stay readable; recording further ops or
  // running backward twice is an error.
  void backward(Var loss) {
    if (finished_) throw ContractError("backward: tape already consumed");
    Node& ln = at(loss);
    if (ln.value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
    ln.grad[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backprop) n.backprop(*this, n);
    }
    for (auto& n : nodes_) n.backprop = nullptr;
    finished_ = true;
  }

  const Shape& shape(Var v) const { return at(v).shape; }
  const std::vector<double>& value(Var v) const { return at(v).value; }
  const std::vector<double>& grad(Var v) const { return at(v).grad; }

  double scalar_value(Var v) const {
    const Node& n = at(v);
    if (n.value.size() != 1)
      throw ShapeError("scalar_value: node has shape " + shape_str(n.shape));
    return n.value[0];
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void(Tape&, const Node&)> backprop;
  };

  Node& at(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ContractError("invalid tape handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& at(Var v) const { return const_cast<Tape*>(this)->at(v); }

  Var push(Shape shape, std::vector<double> value,
           std::function<void(Tape&, const Node&)> bp) {
    if (finished_) throw ContractError("tape already consumed by backward");
    Node n;
    n.shape = std::move(shape);
    n.grad.assign(value.size(), 0.0);
    n.value = std::move(value);
    n.backprop = std::move(bp);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void require_same_shape(const char* op, Var a, Var b) const {
    if (at(a).shape != at(b).shape)
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(at(a).shape) +
                       " vs " + shape_str(at(b).shape));
  }

  std::vector<Node> nodes_;
  bool finished_ = false;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int worst_param = -1;
  int worst_index = -1;
};

// f builds a scalar loss on a fresh tape from freshly created parameter
// leaves; params carries each leaf's shape and initial data. Central
// differences with the given step are compared elementwise against
// backward(); relative error uses denominator max(1e-12, |a|+|b|).
inline GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    const std::vector<std::pair<Shape, std::vector<double>>>& params, double step,
    double tol) {
  if (!(step > 0.0) || !(tol > 0.0))
    throw ContractError("grad_check: step and tol must be positive");

  auto eval = [&](const std::vector<std::vector<double>>& values, bool want_grad,
                  std::vector<std::vector<double>>* grads) -> double {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p)
      leaves.push_back(tape.leaf(params[p].first, values[p]));
    Var loss = f(tape, leaves);
    const double out = tape.scalar_value(loss);
    if (!std::isfinite(out))
      throw NumericError("grad_check: non-finite loss at probe point");
    if (want_grad) {
      tape.backward(loss);
      grads->clear();
      for (Var l : leaves) grads->push_back(tape.grad(l));
    }
    return out;
  };

  std::vector<std::vector<double>> values;
  values.reserve(params.size());
  for (const auto& pr : params) values.push_back(pr.second);

  std::vector<std::vector<double>> analytic;
  eval(values, true, &analytic);

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < values[p].size(); ++i) {
      const double keep = values[p][i];
      values[p][i] = keep + step;
      const double fp = eval(values, false, nullptr);
      values[p][i] = keep - step;
      const double fm = eval(values, false, nullptr);
      values[p][i] = keep;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[p][i];
      const double rel = std::abs(fd - an) / std::max(1e-12, std::abs(fd) + std::abs(an));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = static_cast<int>(p);
        report.worst_index = static_cast<int>(i);
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace sapo::ad
