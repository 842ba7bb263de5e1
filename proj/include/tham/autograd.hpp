// Tape-based reverse-mode automatic differentiation over dense matrices.
//
// A Graph owns a flat tape of nodes created in forward order; backward()
// walks the tape in reverse. Scalars are 1x1 matrices. Parameters live
// outside the tape and accumulate gradients across graphs until zeroed,
// which is what batched training wants.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tham/rng.hpp"

namespace tham::ag {

using Mat = Eigen::MatrixXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  // Adam moments; sized lazily by the optimizer.
  Mat m;
  Mat v;

  Parameter() = default;
  Parameter(std::string n, Mat init) : name(std::move(n)), value(std::move(init)) {
    grad = Mat::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Var constant(Mat v) { return push(std::move(v), false, {}, nullptr); }

  Var param(Parameter& p) {
    Var out = push(p.value, true, {}, nullptr);
    node(out).back = [&p](Graph& g, int id) { p.grad += g.nodes_[id].grad; };
    return out;
  }

  const Mat& value(Var v) const { return nodes_[check(v)].value; }
  Mat& grad(Var v) { return nodes_[check(v)].grad; }

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul: inner dims differ");
    Var out = push(A * B, needs(a) || needs(b), {a, b}, nullptr);
    node(out).back = [a, b](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      if (g.needs(a)) g.nodes_[a.id].grad.noalias() += go * g.nodes_[b.id].value.transpose();
      if (g.needs(b)) g.nodes_[b.id].grad.noalias() += g.nodes_[a.id].value.transpose() * go;
    };
    return out;
  }

  // a * b^T, with b stored row-major as [n, k].
  Var matmul_nt(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.cols()) throw std::invalid_argument("matmul_nt: inner dims differ");
    Var out = push(A * B.transpose(), needs(a) || needs(b), {a, b}, nullptr);
    node(out).back = [a, b](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      if (g.needs(a)) g.nodes_[a.id].grad.noalias() += go * g.nodes_[b.id].value;
      if (g.needs(b)) g.nodes_[b.id].grad.noalias() += go.transpose() * g.nodes_[a.id].value;
    };
    return out;
  }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Var out = push(value(a) + value(b), needs(a) || needs(b), {a, b}, nullptr);
    node(out).back = [a, b](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      if (g.needs(a)) g.nodes_[a.id].grad += go;
      if (g.needs(b)) g.nodes_[b.id].grad += go;
    };
    return out;
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Var out = push(value(a) - value(b), needs(a) || needs(b), {a, b}, nullptr);
    node(out).back = [a, b](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      if (g.needs(a)) g.nodes_[a.id].grad += go;
      if (g.needs(b)) g.nodes_[b.id].grad -= go;
    };
    return out;
  }

  Var cmul(Var a, Var b) {
    check_same_shape(a, b, "cmul");
    Var out = push(value(a).cwiseProduct(value(b)), needs(a) || needs(b), {a, b}, nullptr);
    node(out).back = [a, b](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      if (g.needs(a)) g.nodes_[a.id].grad += go.cwiseProduct(g.nodes_[b.id].value);
      if (g.needs(b)) g.nodes_[b.id].grad += go.cwiseProduct(g.nodes_[a.id].value);
    };
    return out;
  }

  Var scale(Var a, double s) {
    Var out = push(value(a) * s, needs(a), {a}, nullptr);
    node(out).back = [a, s](Graph& g, int id) {
      if (g.needs(a)) g.nodes_[a.id].grad += g.nodes_[id].grad * s;
    };
    return out;
  }

  // Broadcast-add a [1, n] row vector to every row of a.
  Var add_rowvec(Var a, Var row) {
    const Mat& A = value(a);
    const Mat& r = value(row);
    if (r.rows() != 1 || r.cols() != A.cols()) throw std::invalid_argument("add_rowvec: bad row shape");
    Mat out = A;
    out.rowwise() += r.row(0);
    Var v = push(std::move(out), needs(a) || needs(row), {a, row}, nullptr);
    node(v).back = [a, row](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      if (g.needs(a)) g.nodes_[a.id].grad += go;
      if (g.needs(row)) g.nodes_[row.id].grad += go.colwise().sum();
    };
    return v;
  }

  Var vstack(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("vstack: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = value(parts[0]).cols();
    bool any = false;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw std::invalid_argument("vstack: column mismatch");
      rows += value(p).rows();
      any = any || needs(p);
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      out.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    Var v = push(std::move(out), any, parts, nullptr);
    node(v).back = [parts](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      Eigen::Index at2 = 0;
      for (Var p : parts) {
        const Eigen::Index r = g.nodes_[p.id].value.rows();
        if (g.needs(p)) g.nodes_[p.id].grad += go.middleRows(at2, r);
        at2 += r;
      }
    };
    return v;
  }

  Var hstack(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("hstack: empty");
    Eigen::Index cols = 0;
    const Eigen::Index rows = value(parts[0]).rows();
    bool any = false;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw std::invalid_argument("hstack: row mismatch");
      cols += value(p).cols();
      any = any || needs(p);
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      out.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
    }
    Var v = push(std::move(out), any, parts, nullptr);
    node(v).back = [parts](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      Eigen::Index at2 = 0;
      for (Var p : parts) {
        const Eigen::Index c = g.nodes_[p.id].value.cols();
        if (g.needs(p)) g.nodes_[p.id].grad += go.middleCols(at2, c);
        at2 += c;
      }
    };
    return v;
  }

  // Gather rows by index; duplicates allowed (gradients scatter-add).
  Var row_select(Var a, std::vector<int> rows) {
    const Mat& A = value(a);
    Mat out(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= A.rows()) throw std::invalid_argument("row_select: index out of range");
      out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    }
    Var v = push(std::move(out), needs(a), {a}, nullptr);
    node(v).back = [a, rows = std::move(rows)](Graph& g, int id) {
      if (!g.needs(a)) return;
      const Mat& go = g.nodes_[id].grad;
      for (std::size_t i = 0; i < rows.size(); ++i)
        g.nodes_[a.id].grad.row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
    };
    return v;
  }

  Var col_slice(Var a, Eigen::Index c0, Eigen::Index n) {
    const Mat& A = value(a);
    if (c0 < 0 || c0 + n > A.cols()) throw std::invalid_argument("col_slice: out of range");
    Var v = push(A.middleCols(c0, n), needs(a), {a}, nullptr);
    node(v).back = [a, c0, n](Graph& g, int id) {
      if (g.needs(a)) g.nodes_[a.id].grad.middleCols(c0, n) += g.nodes_[id].grad;
    };
    return v;
  }

  // Row-wise layer normalization with learnable gain/bias ([1, n] each).
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Mat& X = value(x);
    const Eigen::Index n = X.cols();
    if (value(gain).cols() != n || value(bias).cols() != n)
      throw std::invalid_argument("layer_norm: gain/bias shape");
    Mat xhat(X.rows(), n);
    Mat inv_std(X.rows(), 1);
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const double mu = X.row(r).mean();
      const double var = (X.row(r).array() - mu).square().sum() / static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std(r, 0) = is;
      xhat.row(r) = (X.row(r).array() - mu) * is;
    }
    Mat out = xhat;
    out.array().rowwise() *= value(gain).row(0).array();
    out.rowwise() += value(bias).row(0);
    Var v = push(std::move(out), needs(x) || needs(gain) || needs(bias), {x, gain, bias}, nullptr);
    node(v).back = [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int id) {
      const Mat& go = g.nodes_[id].grad;
      const Eigen::Index n2 = xhat.cols();
      if (g.needs(gain)) g.nodes_[gain.id].grad += (go.array() * xhat.array()).colwise().sum().matrix();
      if (g.needs(bias)) g.nodes_[bias.id].grad += go.colwise().sum();
      if (g.needs(x)) {
        const auto& gn = g.nodes_[gain.id].value;
        for (Eigen::Index r = 0; r < go.rows(); ++r) {
          Eigen::RowVectorXd dxhat = go.row(r).array() * gn.row(0).array();
          const double s1 = dxhat.sum();
          const double s2 = (dxhat.array() * xhat.row(r).array()).sum();
          g.nodes_[x.id].grad.row(r).array() +=
              inv_std(r, 0) * (dxhat.array() - s1 / static_cast<double>(n2) -
                               xhat.row(r).array() * s2 / static_cast<double>(n2));
        }
      }
    };
    return v;
  }

  // Row-wise softmax over scores with entries j > i masked out (causal).
  Var causal_softmax(Var scores) {
    const Mat& S = value(scores);
    if (S.rows() != S.cols()) throw std::invalid_argument("causal_softmax: square matrix expected");
    Mat P = Mat::Zero(S.rows(), S.cols());
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
      const Eigen::Index k = i + 1;
      const double mx = S.row(i).head(k).maxCoeff();
      Eigen::RowVectorXd e = (S.row(i).head(k).array() - mx).exp();
      P.row(i).head(k) = e / e.sum();
    }
    Var v = push(std::move(P), needs(scores), {scores}, nullptr);
    node(v).back = [scores](Graph& g, int id) {
      if (!g.needs(scores)) return;
      const Mat& P2 = g.nodes_[id].value;
      const Mat& go = g.nodes_[id].grad;
      for (Eigen::Index i = 0; i < P2.rows(); ++i) {
        const Eigen::Index k = i + 1;
        const double dot = (go.row(i).head(k).array() * P2.row(i).head(k).array()).sum();
        g.nodes_[scores.id].grad.row(i).head(k).array() +=
            P2.row(i).head(k).array() * (go.row(i).head(k).array() - dot);
      }
    };
    return v;
  }

  // GELU, tanh approximation (GPT-2 flavor).
  Var gelu(Var x) {
    const Mat& X = value(x);
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    Mat out = X.unaryExpr([](double t) {
      const double u = 0.7978845608028654 * (t + 0.044715 * t * t * t);
      return 0.5 * t * (1.0 + std::tanh(u));
    });
    Var v = push(std::move(out), needs(x), {x}, nullptr);
    node(v).back = [x, c](Graph& g, int id) {
      if (!g.needs(x)) return;
      const Mat& X2 = g.nodes_[x.id].value;
      const Mat& go = g.nodes_[id].grad;
      Mat d = X2.unaryExpr([c](double t) {
        const double u = c * (t + 0.044715 * t * t * t);
        const double th = std::tanh(u);
        const double sech2 = 1.0 - th * th;
        return 0.5 * (1.0 + th) + 0.5 * t * sech2 * c * (1.0 + 3.0 * 0.044715 * t * t);
      });
      g.nodes_[x.id].grad += go.cwiseProduct(d);
    };
    return v;
  }

  Var tanh_op(Var x) {
    Mat out = value(x).array().tanh();
    Var v = push(std::move(out), needs(x), {x}, nullptr);
    node(v).back = [x](Graph& g, int id) {
      if (!g.needs(x)) return;
      const Mat& y = g.nodes_[id].value;
      g.nodes_[x.id].grad.array() += g.nodes_[id].grad.array() * (1.0 - y.array().square());
    };
    return v;
  }

  Var exp_op(Var x) {
    Mat out = value(x).array().exp();
    Var v = push(std::move(out), needs(x), {x}, nullptr);
    node(v).back = [x](Graph& g, int id) {
      if (!g.needs(x)) return;
      g.nodes_[x.id].grad.array() += g.nodes_[id].grad.array() * g.nodes_[id].value.array();
    };
    return v;
  }

  // Inverted dropout; identity when rate == 0. Draws one u01 per entry.
  Var dropout(Var x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (rate == 0.0) return x;
    const Mat& X = value(x);
    Mat mask(X.rows(), X.cols());
    const double keep = 1.0 - rate;
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      for (Eigen::Index i = 0; i < X.rows(); ++i)
        mask(i, j) = rng.u01() < rate ? 0.0 : 1.0 / keep;
    Var v = push(X.cwiseProduct(mask), needs(x), {x}, nullptr);
    node(v).back = [x, mask = std::move(mask)](Graph& g, int id) {
      if (g.needs(x)) g.nodes_[x.id].grad += g.nodes_[id].grad.cwiseProduct(mask);
    };
    return v;
  }

  // Mean negative log-likelihood of targets under row-wise softmax(logits).
  Var softmax_cross_entropy(Var logits, std::vector<int> targets) {
    const Mat& L = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != L.rows())
      throw std::invalid_argument("softmax_cross_entropy: target count != rows");
    Mat probs(L.rows(), L.cols());
    double nll = 0.0;
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      const int t = targets[static_cast<std::size_t>(r)];
      if (t < 0 || t >= L.cols()) throw std::invalid_argument("softmax_cross_entropy: target out of range");
      const double mx = L.row(r).maxCoeff();
      Eigen::RowVectorXd e = (L.row(r).array() - mx).exp();
      const double z = e.sum();
      probs.row(r) = e / z;
      nll -= L(r, t) - mx - std::log(z);
    }
    Mat out(1, 1);
    out(0, 0) = nll / static_cast<double>(L.rows());
    Var v = push(std::move(out), needs(logits), {logits}, nullptr);
    node(v).back = [logits, targets = std::move(targets), probs = std::move(probs)](Graph& g, int id) {
      if (!g.needs(logits)) return;
      const double go = g.nodes_[id].grad(0, 0);
      const double inv_n = 1.0 / static_cast<double>(probs.rows());
      Mat d = probs;
      for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
      g.nodes_[logits.id].grad += go * inv_n * d;
    };
    return v;
  }

  Var mean_all(Var x) {
    const Mat& X = value(x);
    Mat out(1, 1);
    out(0, 0) = X.mean();
    Var v = push(std::move(out), needs(x), {x}, nullptr);
    node(v).back = [x](Graph& g, int id) {
      if (!g.needs(x)) return;
      const double go = g.nodes_[id].grad(0, 0) / static_cast<double>(g.nodes_[x.id].value.size());
      g.nodes_[x.id].grad.array() += go;
    };
    return v;
  }

  // log(mean(exp(x))) over all entries, computed with max-subtraction and
  // clamped below at clamp_min (gradient is zero when the clamp binds).
  Var log_mean_exp(Var x, double clamp_min = -30.0) {
    const Mat& X = value(x);
    const double mx = X.maxCoeff();
    const double s = (X.array() - mx).exp().sum() / static_cast<double>(X.size());
    double val = mx + std::log(s);
    const bool clamped = val < clamp_min;
    if (clamped) val = clamp_min;
    Mat out(1, 1);
    out(0, 0) = val;
    Var v = push(std::move(out), needs(x) && !clamped, {x}, nullptr);
    if (!clamped) {
      node(v).back = [x, mx](Graph& g, int id) {
        if (!g.needs(x)) return;
        const Mat& X2 = g.nodes_[x.id].value;
        Mat w = (X2.array() - mx).exp();
        w /= w.sum();
        g.nodes_[x.id].grad += g.nodes_[id].grad(0, 0) * w;
      };
    }
    return v;
  }

  void backward(Var root) {
    Mat& r = nodes_[check(root)].grad;
    if (r.rows() != 1 || r.cols() != 1) throw std::invalid_argument("backward: root must be scalar");
    r(0, 0) = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.back) n.back(*this, i);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Graph&, int)> back;
    bool requires_grad = false;
  };

  friend class GraphTestPeer;

  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }

  void check_same_shape(Var a, Var b, const char* op) const {
    const Mat& A = nodes_[static_cast<std::size_t>(check(a))].value;
    const Mat& B = nodes_[static_cast<std::size_t>(check(b))].value;
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  int check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::invalid_argument("Graph: invalid Var");
    return v.id;
  }

  Var push(Mat value, bool requires_grad, const std::vector<Var>& parents, std::nullptr_t) {
    bool rg = requires_grad;
    for (Var p : parents) {
      check(p);
      rg = rg || needs(p);
    }
    Node n;
    n.value = std::move(value);
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

// Adam with bias correction. Moments persist in the Parameters themselves.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::int64_t t = 0;

  void step(const std::vector<Parameter*>& params, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (Parameter* p : params) {
      if (p->m.size() == 0) {
        p->m = Mat::Zero(p->value.rows(), p->value.cols());
        p->v = Mat::Zero(p->value.rows(), p->value.cols());
      }
      p->m = beta1 * p->m + (1.0 - beta1) * p->grad;
      p->v = beta2 * p->v + (1.0 - beta2) * p->grad.cwiseProduct(p->grad);
      const Mat mhat = p->m / bc1;
      const Mat vhat = p->v / bc2;
      p->value.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    }
  }
};

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace tham::ag
