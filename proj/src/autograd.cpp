#include "misty/autograd.hpp"

#include <cmath>
#include <numbers>

namespace misty {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch");
}

}  // namespace

Node add(Tape& t, Node a, Node b) {
  check_same_shape(t.value(a), t.value(b), "add");
  return t.emit(t.value(a) + t.value(b), {a.id, b.id},
                [a, b](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  if (tt.needs_grad(a)) tt.grad_ref(a) += g;
                  if (tt.needs_grad(b)) tt.grad_ref(b) += g;
                },
                nullptr, false);
}

Node sub(Tape& t, Node a, Node b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  return t.emit(t.value(a) - t.value(b), {a.id, b.id},
                [a, b](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  if (tt.needs_grad(a)) tt.grad_ref(a) += g;
                  if (tt.needs_grad(b)) tt.grad_ref(b) -= g;
                },
                nullptr, false);
}

Node matmul(Tape& t, Node a, Node b) {
  if (t.value(a).cols() != t.value(b).rows()) throw DimensionError("matmul: inner dims differ");
  return t.emit(t.value(a) * t.value(b), {a.id, b.id},
                [a, b](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  if (tt.needs_grad(a)) tt.grad_ref(a) += g * tt.value(b).transpose();
                  if (tt.needs_grad(b)) tt.grad_ref(b) += tt.value(a).transpose() * g;
                },
                nullptr, false);
}

Node transpose(Tape& t, Node a) {
  return t.emit(t.value(a).transpose(), {a.id},
                [a](Tape& tt, Node out) {
                  if (tt.needs_grad(a)) tt.grad_ref(a) += tt.grad(out).transpose();
                },
                nullptr, false);
}

Node hadamard(Tape& t, Node a, Node b) {
  check_same_shape(t.value(a), t.value(b), "hadamard");
  return t.emit(t.value(a).cwiseProduct(t.value(b)), {a.id, b.id},
                [a, b](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  if (tt.needs_grad(a)) tt.grad_ref(a) += g.cwiseProduct(tt.value(b));
                  if (tt.needs_grad(b)) tt.grad_ref(b) += g.cwiseProduct(tt.value(a));
                },
                nullptr, false);
}

Node scale(Tape& t, Node a, double s) {
  return t.emit(t.value(a) * s, {a.id},
                [a, s](Tape& tt, Node out) {
                  if (tt.needs_grad(a)) tt.grad_ref(a) += s * tt.grad(out);
                },
                nullptr, false);
}

Node add_scalar(Tape& t, Node a, double c) {
  return t.emit((t.value(a).array() + c).matrix(), {a.id},
                [a](Tape& tt, Node out) {
                  if (tt.needs_grad(a)) tt.grad_ref(a) += tt.grad(out);
                },
                nullptr, false);
}

Node square(Tape& t, Node a) {
  return t.emit(t.value(a).array().square().matrix(), {a.id},
                [a](Tape& tt, Node out) {
                  if (tt.needs_grad(a))
                    tt.grad_ref(a) += 2.0 * tt.grad(out).cwiseProduct(tt.value(a));
                },
                nullptr, false);
}

Node exp_elem(Tape& t, Node a) {
  Matrix y = t.value(a).array().exp().matrix();
  return t.emit(std::move(y), {a.id},
                [a](Tape& tt, Node out) {
                  if (tt.needs_grad(a)) tt.grad_ref(a) += tt.grad(out).cwiseProduct(tt.value(out));
                },
                nullptr, false);
}

Node clamp(Tape& t, Node a, double lo, double hi) {
  Matrix y = t.value(a).array().max(lo).min(hi).matrix();
  return t.emit(std::move(y), {a.id},
                [a, lo, hi](Tape& tt, Node out) {
                  if (!tt.needs_grad(a)) return;
                  const Matrix& x = tt.value(a);
                  const Matrix& g = tt.grad(out);
                  Matrix& da = tt.grad_ref(a);
                  for (Index i = 0; i < x.rows(); ++i)
                    for (Index j = 0; j < x.cols(); ++j)
                      if (x(i, j) > lo && x(i, j) < hi) da(i, j) += g(i, j);
                },
                nullptr, false);
}

Node add_rowvec(Tape& t, Node x, Node v) {
  if (t.value(v).rows() != 1 || t.value(v).cols() != t.value(x).cols())
    throw DimensionError("add_rowvec: v must be 1 x cols(x)");
  Matrix y = t.value(x).rowwise() + t.value(v).row(0);
  return t.emit(std::move(y), {x.id, v.id},
                [x, v](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  if (tt.needs_grad(x)) tt.grad_ref(x) += g;
                  if (tt.needs_grad(v)) tt.grad_ref(v) += g.colwise().sum();
                },
                nullptr, false);
}

Node mul_rowvec(Tape& t, Node x, Node v) {
  if (t.value(v).rows() != 1 || t.value(v).cols() != t.value(x).cols())
    throw DimensionError("mul_rowvec: v must be 1 x cols(x)");
  Matrix y = (t.value(x).array().rowwise() * t.value(v).row(0).array()).matrix();
  return t.emit(std::move(y), {x.id, v.id},
                [x, v](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  if (tt.needs_grad(x))
                    tt.grad_ref(x) += (g.array().rowwise() * tt.value(v).row(0).array()).matrix();
                  if (tt.needs_grad(v))
                    tt.grad_ref(v) += g.cwiseProduct(tt.value(x)).colwise().sum();
                },
                nullptr, false);
}

Node concat_rows(Tape& t, const std::vector<Node>& parts) {
  if (parts.empty()) throw InputError("concat_rows: empty");
  Index cols = t.value(parts[0]).cols();
  Index rows = 0;
  for (Node p : parts) {
    if (t.value(p).cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += t.value(p).rows();
  }
  Matrix y(rows, cols);
  Index r = 0;
  std::vector<int> ids;
  for (Node p : parts) {
    y.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
    ids.push_back(p.id);
  }
  std::vector<Node> caps = parts;
  return t.emit(std::move(y), std::move(ids),
                [caps](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  Index r = 0;
                  for (Node p : caps) {
                    Index n = tt.value(p).rows();
                    if (tt.needs_grad(p)) tt.grad_ref(p) += g.middleRows(r, n);
                    r += n;
                  }
                },
                nullptr, false);
}

Node slice_rows(Tape& t, Node a, Index first, Index count) {
  if (first < 0 || first + count > t.value(a).rows()) throw DimensionError("slice_rows: range");
  return t.emit(t.value(a).middleRows(first, count), {a.id},
                [a, first, count](Tape& tt, Node out) {
                  if (tt.needs_grad(a))
                    tt.grad_ref(a).middleRows(first, count) += tt.grad(out);
                },
                nullptr, false);
}

Node concat_cols(Tape& t, const std::vector<Node>& parts) {
  if (parts.empty()) throw InputError("concat_cols: empty");
  Index rows = t.value(parts[0]).rows();
  Index cols = 0;
  for (Node p : parts) {
    if (t.value(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += t.value(p).cols();
  }
  Matrix y(rows, cols);
  Index c = 0;
  std::vector<int> ids;
  for (Node p : parts) {
    y.middleCols(c, t.value(p).cols()) = t.value(p);
    c += t.value(p).cols();
    ids.push_back(p.id);
  }
  std::vector<Node> caps = parts;
  return t.emit(std::move(y), std::move(ids),
                [caps](Tape& tt, Node out) {
                  const Matrix& g = tt.grad(out);
                  Index c = 0;
                  for (Node p : caps) {
                    Index n = tt.value(p).cols();
                    if (tt.needs_grad(p)) tt.grad_ref(p) += g.middleCols(c, n);
                    c += n;
                  }
                },
                nullptr, false);
}

Node slice_cols(Tape& t, Node a, Index first, Index count) {
  if (first < 0 || first + count > t.value(a).cols()) throw DimensionError("slice_cols: range");
  return t.emit(t.value(a).middleCols(first, count), {a.id},
                [a, first, count](Tape& tt, Node out) {
                  if (tt.needs_grad(a))
                    tt.grad_ref(a).middleCols(first, count) += tt.grad(out);
                },
                nullptr, false);
}

Node mean_rows(Tape& t, Node a) {
  Index n = t.value(a).rows();
  Matrix y = t.value(a).colwise().mean();
  return t.emit(std::move(y), {a.id},
                [a, n](Tape& tt, Node out) {
                  if (tt.needs_grad(a))
                    tt.grad_ref(a) += (tt.grad(out) / double(n)).replicate(n, 1);
                },
                nullptr, false);
}

Node sum_all(Tape& t, Node a) {
  Matrix y(1, 1);
  y(0, 0) = t.value(a).sum();
  return t.emit(std::move(y), {a.id},
                [a](Tape& tt, Node out) {
                  if (tt.needs_grad(a))
                    tt.grad_ref(a).array() += tt.grad(out)(0, 0);
                },
                nullptr, false);
}

// Tanh-approximation GELU, fixed project-wide.
Matrix gelu_forward(const Matrix& x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return (0.5 * x.array() * (1.0 + ((x.array() + 0.044715 * x.array().cube()) * k).tanh()))
      .matrix();
}

Node gelu(Tape& t, Node a) {
  return t.emit(gelu_forward(t.value(a)), {a.id},
                [a](Tape& tt, Node out) {
                  if (!tt.needs_grad(a)) return;
                  const double k = std::sqrt(2.0 / std::numbers::pi);
                  const auto x = tt.value(a).array();
                  auto u = k * (x + 0.044715 * x.cube());
                  auto th = u.tanh();
                  auto dydx = 0.5 * (1.0 + th) +
                              0.5 * x * (1.0 - th.square()) * k * (1.0 + 3.0 * 0.044715 * x.square());
                  tt.grad_ref(a).array() += tt.grad(out).array() * dydx;
                },
                nullptr, false);
}

Matrix softmax_rows_forward(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    Eigen::ArrayXd e = (x.row(i).array() - m).exp();
    y.row(i) = (e / e.sum()).matrix();
  }
  return y;
}

Node softmax_rows(Tape& t, Node a) {
  return t.emit(softmax_rows_forward(t.value(a)), {a.id},
                [a](Tape& tt, Node out) {
                  if (!tt.needs_grad(a)) return;
                  const Matrix& y = tt.value(out);
                  const Matrix& g = tt.grad(out);
                  Matrix& da = tt.grad_ref(a);
                  for (Index i = 0; i < y.rows(); ++i) {
                    double dot = g.row(i).dot(y.row(i));
                    da.row(i) += (y.row(i).array() * (g.row(i).array() - dot)).matrix();
                  }
                },
                nullptr, false);
}

Matrix layer_norm_forward(const Matrix& x, const RowVector& gamma, const RowVector& beta,
                          double eps) {
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().mean();
    y.row(i) =
        (((x.row(i).array() - mu) / std::sqrt(var + eps)) * gamma.array() + beta.array()).matrix();
  }
  return y;
}

Node layer_norm_nodes(Tape& t, Node x, Node gamma, Node beta, double eps) {
  const Matrix& xv = t.value(x);
  if (t.value(gamma).cols() != xv.cols() || t.value(beta).cols() != xv.cols())
    throw DimensionError("layer_norm: gamma/beta must be 1 x cols(x)");
  Matrix y = layer_norm_forward(xv, t.value(gamma).row(0), t.value(beta).row(0), eps);
  return t.emit(std::move(y), {x.id, gamma.id, beta.id},
                [x, gamma, beta, eps](Tape& tt, Node out) {
                  const Matrix& xv = tt.value(x);
                  const Matrix& g = tt.grad(out);
                  const Index n = xv.cols();
                  for (Index i = 0; i < xv.rows(); ++i) {
                    double mu = xv.row(i).mean();
                    double var = (xv.row(i).array() - mu).square().mean();
                    double inv = 1.0 / std::sqrt(var + eps);
                    Eigen::ArrayXd xhat = (xv.row(i).array() - mu) * inv;
                    if (tt.needs_grad(gamma))
                      tt.grad_ref(gamma).row(0).array() += g.row(i).array() * xhat.transpose();
                    if (tt.needs_grad(beta)) tt.grad_ref(beta).row(0) += g.row(i);
                    if (tt.needs_grad(x)) {
                      Eigen::ArrayXd dxhat =
                          g.row(i).array().transpose() * tt.value(gamma).row(0).array().transpose();
                      double m1 = dxhat.mean();
                      double m2 = (dxhat * xhat).mean();
                      tt.grad_ref(x).row(i).array() +=
                          (inv * (dxhat - m1 - xhat * m2)).transpose();
                    }
                    (void)n;
                  }
                },
                nullptr, false);
}

Node layer_norm(Tape& t, Node x, Param& gamma, Param& beta, double eps) {
  return layer_norm_nodes(t, x, t.param(gamma), t.param(beta), eps);
}

Node linear(Tape& t, Node x, Param& w, Param& b) {
  if (t.value(x).cols() != w.value.rows()) throw DimensionError("linear: x.cols != w.rows");
  return add_rowvec(t, matmul(t, x, t.param(w)), t.param(b));
}

Node linear_frozen(Tape& t, Node x, const Param& w, const Param& b) {
  if (t.value(x).cols() != w.value.rows()) throw DimensionError("linear: x.cols != w.rows");
  return add_rowvec(t, matmul(t, x, t.frozen(w)), t.frozen(b));
}

Node mse(Tape& t, Node a, Node b) {
  check_same_shape(t.value(a), t.value(b), "mse");
  double n = double(t.value(a).size());
  Node d = sub(t, a, b);
  return scale(t, sum_all(t, square(t, d)), 1.0 / n);
}

Node cross_entropy_logits(Tape& t, Node logits, const std::vector<int>& labels) {
  const Matrix& l = t.value(logits);
  if (Index(labels.size()) != l.rows()) throw DimensionError("cross_entropy: label count");
  Matrix p = softmax_rows_forward(l);
  double loss = 0.0;
  for (Index i = 0; i < l.rows(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= l.cols()) throw InputError("cross_entropy: label out of range");
    loss -= std::log(std::max(p(i, y), 1e-300));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / double(l.rows());
  std::vector<int> lab = labels;
  return t.emit(std::move(out), {logits.id},
                [logits, p, lab](Tape& tt, Node o) {
                  if (!tt.needs_grad(logits)) return;
                  double g = tt.grad(o)(0, 0) / double(p.rows());
                  Matrix d = p;
                  for (Index i = 0; i < d.rows(); ++i) d(i, lab[i]) -= 1.0;
                  tt.grad_ref(logits) += g * d;
                },
                nullptr, false);
}

Node sum_sq_scaled(Tape& t, Node a, double s) {
  Matrix y(1, 1);
  y(0, 0) = s * t.value(a).squaredNorm();
  return t.emit(std::move(y), {a.id},
                [a, s](Tape& tt, Node out) {
                  if (tt.needs_grad(a))
                    tt.grad_ref(a) += 2.0 * s * tt.grad(out)(0, 0) * tt.value(a);
                },
                nullptr, false);
}

double grad_check(const std::function<double(bool)>& f, const std::vector<Param*>& params,
                  double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw InputError("grad_check: eps out of [1e-7, 1e-3]");
  for (Param* p : params) p->zero_grad();
  double loss0 = f(true);
  if (!std::isfinite(loss0)) throw TrainingError("grad_check: non-finite loss");
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  double max_rel = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& v = params[k]->value;
    for (Index i = 0; i < v.rows(); ++i) {
      for (Index j = 0; j < v.cols(); ++j) {
        double saved = v(i, j);
        v(i, j) = saved + eps;
        double lp = f(false);
        v(i, j) = saved - eps;
        double lm = f(false);
        v(i, j) = saved;
        if (!std::isfinite(lp) || !std::isfinite(lm))
          throw TrainingError("grad_check: non-finite loss under perturbation");
        double numeric = (lp - lm) / (2.0 * eps);
        double an = analytic[k](i, j);
        // Below this absolute floor the central difference is dominated by
        // cancellation noise (structurally zero gradients hit this), so the
        // relative form would compare noise against noise.
        if (std::abs(an - numeric) < 1e-8) continue;
        double rel = std::abs(an - numeric) / (std::abs(an) + std::abs(numeric) + 1e-12);
        max_rel = std::max(max_rel, rel);
      }
    }
  }
  return max_rel;
}

}  // namespace misty
