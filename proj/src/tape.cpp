#include "mmnar/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "mmnar/kernels.hpp"
#include "mmnar/rng.hpp"

namespace mmnar {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                              b.shape_str());
}

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape != b.tape)
    throw std::invalid_argument(std::string(op) + ": operands from different tapes");
  return *a.tape;
}

double stable_sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

// ---- ParamStore ------------------------------------------------------------

Param& ParamStore::add(const std::string& name, int rows, int cols) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Tensor(rows, cols);
  p->grad = Tensor(rows, cols);
  index_[name] = static_cast<int>(params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return *params_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return *params_[it->second];
}

Param* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

void ParamStore::zero_grads() {
  for (auto& p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

size_t ParamStore::value_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

std::vector<double> ParamStore::snapshot() const {
  std::vector<double> out;
  out.reserve(value_count());
  for (const auto& p : params_) out.insert(out.end(), p->value.data.begin(), p->value.data.end());
  return out;
}

void ParamStore::restore(const std::vector<double>& snap) {
  if (snap.size() != value_count()) throw std::invalid_argument("ParamStore::restore: size mismatch");
  size_t off = 0;
  for (auto& p : params_) {
    std::copy(snap.begin() + off, snap.begin() + off + p->value.size(), p->value.data.begin());
    off += p->value.size();
  }
}

// ---- Tape ------------------------------------------------------------------

Var Tape::leaf(Tensor value) { return emit(std::move(value), "leaf", nullptr); }

Var Tape::leaf_param(Param& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Var v = emit(p.value, "param", nullptr);
  param_sinks_.emplace_back(v.id, &p);
  param_nodes_[&p] = v.id;
  return v;
}

Var Tape::emit(Tensor value, const char* op, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor(n.value.rows, n.value.cols);
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) throw std::logic_error("Tape::grad: node has no gradient (not reached by backward)");
  return n.grad;
}

void Tape::backward(Var loss) {
  if (!loss.valid() || loss.tape != this) throw std::invalid_argument("backward: loss not on this tape");
  const Tensor& lv = nodes_[loss.id].value;
  if (!lv.is_scalar())
    throw std::invalid_argument("backward: loss must be a 1 x 1 scalar, got " + lv.shape_str());
  grad_ref(loss.id).data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, id);
  }
  for (auto& [id, p] : param_sinks_) {
    if (nodes_[id].grad.size() == 0) continue;
    kernels::add_inplace(p->grad, nodes_[id].grad);
  }
}

void Tape::check_finite() const {
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.all_finite())
      throw std::runtime_error("non-finite value in node " + std::to_string(i) + " (op " + nodes_[i].op + ")");
    if (nodes_[i].grad.size() > 0 && !nodes_[i].grad.all_finite())
      throw std::runtime_error("non-finite gradient in node " + std::to_string(i) + " (op " + nodes_[i].op + ")");
  }
}

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (A.cols != B.rows) shape_error("matmul", A, B);
  Tensor out;
  kernels::matmul_nn(A, B, out);
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(out), "matmul", [aid, bid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor ga, gb;
    kernels::matmul_nt(g, tp.val(bid), ga);
    kernels::matmul_tn(tp.val(aid), g, gb);
    kernels::add_inplace(tp.grad_ref(aid), ga);
    kernels::add_inplace(tp.grad_ref(bid), gb);
  });
}

Var matmul_tb(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_tb");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (A.cols != B.cols) shape_error("matmul_tb", A, B);
  Tensor out;
  kernels::matmul_nt(A, B, out);
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(out), "matmul_tb", [aid, bid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);  // [m,n]; A [m,k], B [n,k]
    Tensor ga, gb;
    kernels::matmul_nn(g, tp.val(bid), ga);
    kernels::matmul_tn(g, tp.val(aid), gb);
    kernels::add_inplace(tp.grad_ref(aid), ga);
    kernels::add_inplace(tp.grad_ref(bid), gb);
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (!A.same_shape(B)) shape_error("add", A, B);
  Tensor out = A;
  kernels::add_inplace(out, B);
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(out), "add", [aid, bid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    kernels::add_inplace(tp.grad_ref(aid), g);
    kernels::add_inplace(tp.grad_ref(bid), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (!A.same_shape(B)) shape_error("sub", A, B);
  Tensor out = A;
  kernels::axpy(-1.0, B, out);
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(out), "sub", [aid, bid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    kernels::add_inplace(tp.grad_ref(aid), g);
    kernels::axpy(-1.0, g, tp.grad_ref(bid));
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (!A.same_shape(B)) shape_error("mul", A, B);
  Tensor out(A.rows, A.cols);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = A.data[i] * B.data[i];
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(out), "mul", [aid, bid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& A = tp.val(aid);
    const Tensor& B = tp.val(bid);
    Tensor& ga = tp.grad_ref(aid);
    Tensor& gb = tp.grad_ref(bid);
    for (size_t i = 0; i < g.size(); ++i) {
      ga.data[i] += g.data[i] * B.data[i];
      gb.data[i] += g.data[i] * A.data[i];
    }
  });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = t.val(a.id);
  for (double& v : out.data) v *= c;
  const int aid = a.id;
  return t.emit(std::move(out), "scale", [aid, c](Tape& tp, int self) {
    kernels::axpy(c, tp.grad_ref(self), tp.grad_ref(aid));
  });
}

Var add_rowvec(Var a, Var b) {
  Tape& t = same_tape(a, b, "add_rowvec");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (B.rows != 1 || B.cols != A.cols) shape_error("add_rowvec", A, B);
  Tensor out = A;
  for (int i = 0; i < A.rows; ++i) {
    double* r = out.row_ptr(i);
    for (int j = 0; j < A.cols; ++j) r[j] += B.data[j];
  }
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(out), "add_rowvec", [aid, bid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    kernels::add_inplace(tp.grad_ref(aid), g);
    Tensor& gb = tp.grad_ref(bid);
    for (int i = 0; i < g.rows; ++i) {
      const double* r = g.row_ptr(i);
      for (int j = 0; j < g.cols; ++j) gb.data[j] += r[j];
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Tensor out;
  kernels::sigmoid_map(t.val(a.id), out);
  const int aid = a.id;
  return t.emit(std::move(out), "sigmoid", [aid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.val(self);
    Tensor& ga = tp.grad_ref(aid);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

Var tanh_op(Var a) {
  Tape& t = *a.tape;
  Tensor out;
  kernels::tanh_map(t.val(a.id), out);
  const int aid = a.id;
  return t.emit(std::move(out), "tanh", [aid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.val(self);
    Tensor& ga = tp.grad_ref(aid);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  Tensor out;
  kernels::relu_map(t.val(a.id), out);
  const int aid = a.id;
  return t.emit(std::move(out), "relu", [aid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.val(aid);
    Tensor& ga = tp.grad_ref(aid);
    for (size_t i = 0; i < g.size(); ++i)
      if (x.data[i] > 0.0) ga.data[i] += g.data[i];
  });
}

namespace {

Var softmax_impl(Var a, std::vector<uint8_t> key_mask, const char* op) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  const bool masked = !key_mask.empty();
  if (masked && static_cast<int>(key_mask.size()) != A.cols)
    throw std::invalid_argument(std::string(op) + ": mask length " + std::to_string(key_mask.size()) +
                                " does not match columns of " + A.shape_str());
  Tensor out(A.rows, A.cols);
  for (int i = 0; i < A.rows; ++i) {
    const double* x = A.row_ptr(i);
    double* y = out.row_ptr(i);
    double mx = -HUGE_VAL;
    for (int j = 0; j < A.cols; ++j)
      if (!masked || key_mask[j]) mx = std::max(mx, x[j]);
    if (mx == -HUGE_VAL)
      throw std::invalid_argument(std::string(op) + ": all positions masked in row " + std::to_string(i));
    double z = 0.0;
    for (int j = 0; j < A.cols; ++j) {
      if (masked && !key_mask[j]) {
        y[j] = 0.0;
        continue;
      }
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < A.cols; ++j) y[j] /= z;
  }
  const int aid = a.id;
  return t.emit(std::move(out), op, [aid](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.val(self);
    Tensor& ga = tp.grad_ref(aid);
    for (int i = 0; i < g.rows; ++i) {
      const double* gi = g.row_ptr(i);
      const double* yi = y.row_ptr(i);
      double dot = 0.0;
      for (int j = 0; j < g.cols; ++j) dot += gi[j] * yi[j];
      double* gai = ga.row_ptr(i);
      for (int j = 0; j < g.cols; ++j) gai[j] += yi[j] * (gi[j] - dot);
    }
  });
}

}  // namespace

Var softmax_rows(Var a) { return softmax_impl(a, {}, "softmax_rows"); }

Var masked_softmax_rows(Var a, std::vector<uint8_t> key_mask) {
  return softmax_impl(a, std::move(key_mask), "masked_softmax_rows");
}

Var mean_axis(Var a, int axis) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  if (axis != 0 && axis != 1) throw std::invalid_argument("mean_axis: axis must be 0 or 1");
  Tensor out;
  if (axis == 0) {
    out = Tensor(1, A.cols);
    for (int i = 0; i < A.rows; ++i)
      for (int j = 0; j < A.cols; ++j) out.data[j] += A.at(i, j);
    for (double& v : out.data) v /= A.rows;
  } else {
    out = Tensor(A.rows, 1);
    for (int i = 0; i < A.rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < A.cols; ++j) s += A.at(i, j);
      out.data[i] = s / A.cols;
    }
  }
  const int aid = a.id;
  return t.emit(std::move(out), "mean_axis", [aid, axis](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(aid);
    if (axis == 0) {
      for (int i = 0; i < ga.rows; ++i)
        for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += g.data[j] / ga.rows;
    } else {
      for (int i = 0; i < ga.rows; ++i)
        for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += g.data[i] / ga.cols;
    }
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  double s = 0.0;
  for (double v : A.data) s += v;
  const int aid = a.id;
  return t.emit(Tensor::scalar(s), "sum_all", [aid](Tape& tp, int self) {
    const double g = tp.grad_ref(self).data[0];
    Tensor& ga = tp.grad_ref(aid);
    for (double& v : ga.data) v += g;
  });
}

Var sum_squares(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  double s = 0.0;
  for (double v : A.data) s += v * v;
  const int aid = a.id;
  return t.emit(Tensor::scalar(s), "sum_squares", [aid](Tape& tp, int self) {
    const double g = tp.grad_ref(self).data[0];
    const Tensor& x = tp.val(aid);
    Tensor& ga = tp.grad_ref(aid);
    for (size_t i = 0; i < x.size(); ++i) ga.data[i] += 2.0 * g * x.data[i];
  });
}

Var l2_norm(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  double s = 0.0;
  for (double v : A.data) s += v * v;
  const double n = std::sqrt(s);
  const int aid = a.id;
  return t.emit(Tensor::scalar(n), "l2_norm", [aid, n](Tape& tp, int self) {
    const double g = tp.grad_ref(self).data[0];
    const Tensor& x = tp.val(aid);
    Tensor& ga = tp.grad_ref(aid);
    const double inv = 1.0 / (n + 1e-12);
    for (size_t i = 0; i < x.size(); ++i) ga.data[i] += g * x.data[i] * inv;
  });
}

namespace {
constexpr double kNormEps = 1e-12;
}

Var cosine_sim(Var a, Var b) {
  Tape& t = same_tape(a, b, "cosine_sim");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (!A.same_shape(B)) shape_error("cosine_sim", A, B);
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < A.size(); ++i) {
    dot += A.data[i] * B.data[i];
    na2 += A.data[i] * A.data[i];
    nb2 += B.data[i] * B.data[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double denom = (na + kNormEps) * (nb + kNormEps);
  const double sim = dot / denom;
  const int aid = a.id, bid = b.id;
  return t.emit(Tensor::scalar(sim), "cosine_sim", [aid, bid, na, nb, sim](Tape& tp, int self) {
    const double g = tp.grad_ref(self).data[0];
    const Tensor& A = tp.val(aid);
    const Tensor& B = tp.val(bid);
    Tensor& ga = tp.grad_ref(aid);
    Tensor& gb = tp.grad_ref(bid);
    const double denom = (na + kNormEps) * (nb + kNormEps);
    const double inv_na = na > 0.0 ? 1.0 / na : 0.0;
    const double inv_nb = nb > 0.0 ? 1.0 / nb : 0.0;
    for (size_t i = 0; i < A.size(); ++i) {
      ga.data[i] += g * (B.data[i] / denom - sim * A.data[i] * inv_na / (na + kNormEps));
      gb.data[i] += g * (A.data[i] / denom - sim * B.data[i] * inv_nb / (nb + kNormEps));
    }
  });
}

Var cosine_sim_matrix(Var e, Var r) {
  Tape& t = same_tape(e, r, "cosine_sim_matrix");
  const Tensor& E = t.val(e.id);
  const Tensor& R = t.val(r.id);
  if (E.cols != R.cols) shape_error("cosine_sim_matrix", E, R);
  const int m = E.rows, n = R.rows;
  Tensor out(m, n);
  std::vector<double> ne(m), nr(n);
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    const double* row = E.row_ptr(i);
    for (int j = 0; j < E.cols; ++j) s += row[j] * row[j];
    ne[i] = std::sqrt(s);
  }
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = R.row_ptr(i);
    for (int j = 0; j < R.cols; ++j) s += row[j] * row[j];
    nr[i] = std::sqrt(s);
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      const double* ei = E.row_ptr(i);
      const double* rj = R.row_ptr(j);
      for (int c = 0; c < E.cols; ++c) dot += ei[c] * rj[c];
      out.at(i, j) = dot / ((ne[i] + kNormEps) * (nr[j] + kNormEps));
    }
  const int eid = e.id, rid = r.id;
  return t.emit(std::move(out), "cosine_sim_matrix", [eid, rid, ne, nr](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& S = tp.val(self);
    const Tensor& E = tp.val(eid);
    const Tensor& R = tp.val(rid);
    Tensor& ge = tp.grad_ref(eid);
    Tensor& gr = tp.grad_ref(rid);
    const int m = E.rows, n = R.rows, d = E.cols;
    for (int i = 0; i < m; ++i) {
      const double inv_ne = ne[i] > 0.0 ? 1.0 / ne[i] : 0.0;
      for (int j = 0; j < n; ++j) {
        const double gij = g.at(i, j);
        if (gij == 0.0) continue;
        const double sij = S.at(i, j);
        const double denom = (ne[i] + kNormEps) * (nr[j] + kNormEps);
        const double inv_nr = nr[j] > 0.0 ? 1.0 / nr[j] : 0.0;
        const double* ei = E.row_ptr(i);
        const double* rj = R.row_ptr(j);
        double* gei = ge.row_ptr(i);
        double* grj = gr.row_ptr(j);
        for (int c = 0; c < d; ++c) {
          gei[c] += gij * (rj[c] / denom - sij * ei[c] * inv_ne / (ne[i] + kNormEps));
          grj[c] += gij * (ei[c] / denom - sij * rj[c] * inv_nr / (nr[j] + kNormEps));
        }
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const int rows = t.val(parts[0].id).rows;
  int cols = 0;
  for (const Var& p : parts) {
    const Tensor& x = t.val(p.id);
    if (x.rows != rows) shape_error("concat_cols", t.val(parts[0].id), x);
    cols += x.cols;
  }
  Tensor out(rows, cols);
  std::vector<int> ids, offsets;
  int off = 0;
  for (const Var& p : parts) {
    const Tensor& x = t.val(p.id);
    for (int i = 0; i < rows; ++i)
      std::copy(x.row_ptr(i), x.row_ptr(i) + x.cols, out.row_ptr(i) + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += x.cols;
  }
  return t.emit(std::move(out), "concat_cols", [ids, offsets](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    for (size_t k = 0; k < ids.size(); ++k) {
      Tensor& gp = tp.grad_ref(ids[k]);
      for (int i = 0; i < gp.rows; ++i) {
        const double* gi = g.row_ptr(i) + offsets[k];
        double* pi = gp.row_ptr(i);
        for (int j = 0; j < gp.cols; ++j) pi[j] += gi[j];
      }
    }
  });
}

Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no inputs");
  Tape& t = *parts[0].tape;
  const int cols = t.val(parts[0].id).cols;
  int rows = 0;
  for (const Var& p : parts) {
    const Tensor& x = t.val(p.id);
    if (x.cols != cols) shape_error("stack_rows", t.val(parts[0].id), x);
    rows += x.rows;
  }
  Tensor out(rows, cols);
  std::vector<int> ids, offsets;
  int off = 0;
  for (const Var& p : parts) {
    const Tensor& x = t.val(p.id);
    std::copy(x.data.begin(), x.data.end(), out.data.begin() + static_cast<size_t>(off) * cols);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += x.rows;
  }
  return t.emit(std::move(out), "stack_rows", [ids, offsets](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    for (size_t k = 0; k < ids.size(); ++k) {
      Tensor& gp = tp.grad_ref(ids[k]);
      const double* src = g.data.data() + static_cast<size_t>(offsets[k]) * g.cols;
      for (size_t i = 0; i < gp.size(); ++i) gp.data[i] += src[i];
    }
  });
}

Var slice_rows(Var a, int row0, int nrows) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  if (row0 < 0 || nrows <= 0 || row0 + nrows > A.rows)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(row0) + ", " +
                                std::to_string(row0 + nrows) + ") out of bounds for " + A.shape_str());
  Tensor out(nrows, A.cols);
  std::copy(A.row_ptr(row0), A.row_ptr(row0) + static_cast<size_t>(nrows) * A.cols, out.data.begin());
  const int aid = a.id;
  return t.emit(std::move(out), "slice_rows", [aid, row0](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(aid);
    double* dst = ga.row_ptr(row0);
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g.data[i];
  });
}

Var masked_mean_pool(Var a, std::vector<uint8_t> row_mask) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  if (static_cast<int>(row_mask.size()) != A.rows)
    throw std::invalid_argument("masked_mean_pool: mask length " + std::to_string(row_mask.size()) +
                                " does not match rows of " + A.shape_str());
  int cnt = 0;
  for (uint8_t m : row_mask) cnt += m ? 1 : 0;
  if (cnt == 0) throw std::invalid_argument("masked_mean_pool: mask selects no rows");
  Tensor out(1, A.cols);
  for (int i = 0; i < A.rows; ++i) {
    if (!row_mask[i]) continue;
    const double* r = A.row_ptr(i);
    for (int j = 0; j < A.cols; ++j) out.data[j] += r[j];
  }
  for (double& v : out.data) v /= cnt;
  const int aid = a.id;
  return t.emit(std::move(out), "masked_mean_pool", [aid, row_mask, cnt](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(aid);
    for (int i = 0; i < ga.rows; ++i) {
      if (!row_mask[i]) continue;
      double* r = ga.row_ptr(i);
      for (int j = 0; j < ga.cols; ++j) r[j] += g.data[j] / cnt;
    }
  });
}

Var bce_with_logits(Var logits, Tensor targets) {
  Tape& t = *logits.tape;
  const Tensor& X = t.val(logits.id);
  if (!X.same_shape(targets)) shape_error("bce_with_logits", X, targets);
  Tensor out(X.rows, X.cols);
  for (size_t i = 0; i < X.size(); ++i) {
    const double x = X.data[i];
    const double y = targets.data[i];
    out.data[i] = std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  const int lid = logits.id;
  return t.emit(std::move(out), "bce_with_logits", [lid, targets](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& X = tp.val(lid);
    Tensor& gl = tp.grad_ref(lid);
    for (size_t i = 0; i < X.size(); ++i)
      gl.data[i] += g.data[i] * (stable_sigmoid(X.data[i]) - targets.data[i]);
  });
}

Var focal_bce_with_logits(Var logits, Tensor targets, double gamma) {
  if (gamma == 0.0) return bce_with_logits(logits, std::move(targets));
  Tape& t = *logits.tape;
  const Tensor& X = t.val(logits.id);
  if (!X.same_shape(targets)) shape_error("focal_bce_with_logits", X, targets);
  Tensor out(X.rows, X.cols);
  for (size_t i = 0; i < X.size(); ++i) {
    const double x = X.data[i];
    const double p = stable_sigmoid(x);
    const double sp_pos = std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)));  // -log p
    const double sp_neg = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));   // -log(1-p)
    out.data[i] = targets.data[i] > 0.5 ? std::pow(1.0 - p, gamma) * sp_pos : std::pow(p, gamma) * sp_neg;
  }
  const int lid = logits.id;
  return t.emit(std::move(out), "focal_bce_with_logits", [lid, targets, gamma](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& X = tp.val(lid);
    Tensor& gl = tp.grad_ref(lid);
    for (size_t i = 0; i < X.size(); ++i) {
      const double x = X.data[i];
      const double p = stable_sigmoid(x);
      const double sp_pos = std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)));
      const double sp_neg = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
      double d;
      if (targets.data[i] > 0.5)
        d = -std::pow(1.0 - p, gamma) * (gamma * p * sp_pos + (1.0 - p));
      else
        d = std::pow(p, gamma) * (gamma * (1.0 - p) * sp_neg + p);
      gl.data[i] += g.data[i] * d;
    }
  });
}

Var mse(Var a, Var b) {
  Tape& t = same_tape(a, b, "mse");
  const Tensor& A = t.val(a.id);
  const Tensor& B = t.val(b.id);
  if (!A.same_shape(B)) shape_error("mse", A, B);
  double s = 0.0;
  for (size_t i = 0; i < A.size(); ++i) {
    const double d = A.data[i] - B.data[i];
    s += d * d;
  }
  const double n = static_cast<double>(A.size());
  const int aid = a.id, bid = b.id;
  return t.emit(Tensor::scalar(s / n), "mse", [aid, bid, n](Tape& tp, int self) {
    const double g = tp.grad_ref(self).data[0];
    const Tensor& A = tp.val(aid);
    const Tensor& B = tp.val(bid);
    Tensor& ga = tp.grad_ref(aid);
    Tensor& gb = tp.grad_ref(bid);
    for (size_t i = 0; i < A.size(); ++i) {
      const double d = 2.0 * g * (A.data[i] - B.data[i]) / n;
      ga.data[i] += d;
      gb.data[i] -= d;
    }
  });
}

Var info_nce_rows(Var sims, double temperature) {
  Tape& t = *sims.tape;
  const Tensor& S = t.val(sims.id);
  if (S.rows != S.cols)
    throw std::invalid_argument("info_nce_rows: similarity matrix must be square, got " + S.shape_str());
  if (temperature <= 0.0) throw std::invalid_argument("info_nce_rows: temperature must be positive");
  const int n = S.rows;
  double total = 0.0;
  Tensor probs(n, n);  // softmax of S/t per row, cached for backward
  for (int i = 0; i < n; ++i) {
    const double* si = S.row_ptr(i);
    double mx = -HUGE_VAL;
    for (int j = 0; j < n; ++j) mx = std::max(mx, si[j] / temperature);
    double z = 0.0;
    double* pi = probs.row_ptr(i);
    for (int j = 0; j < n; ++j) {
      pi[j] = std::exp(si[j] / temperature - mx);
      z += pi[j];
    }
    for (int j = 0; j < n; ++j) pi[j] /= z;
    total += std::log(z) + mx - si[i] / temperature;
  }
  const int sid = sims.id;
  return t.emit(Tensor::scalar(total / n), "info_nce_rows",
                [sid, temperature, probs](Tape& tp, int self) {
                  const double g = tp.grad_ref(self).data[0];
                  Tensor& gs = tp.grad_ref(sid);
                  const int n = gs.rows;
                  const double c = g / (temperature * n);
                  for (int i = 0; i < n; ++i) {
                    const double* pi = probs.row_ptr(i);
                    double* gi = gs.row_ptr(i);
                    for (int j = 0; j < n; ++j) gi[j] += c * (pi[j] - (i == j ? 1.0 : 0.0));
                  }
                });
}

Var dropout(Var a, double p, uint64_t key) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.id);
  if (p == 0.0) return a;
  StreamRng rng(key, "dropout");
  const double keep = 1.0 - p;
  std::vector<double> mask(A.size());
  for (double& m : mask) m = rng.uniform() >= p ? 1.0 / keep : 0.0;
  Tensor out(A.rows, A.cols);
  for (size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] * mask[i];
  const int aid = a.id;
  return t.emit(std::move(out), "dropout", [aid, mask](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(aid);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * mask[i];
  });
}

}  // namespace mmnar
