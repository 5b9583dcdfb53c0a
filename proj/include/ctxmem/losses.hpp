#pragma once

// Teacher-student mismatch losses. Value functions take per-position
// probability rows (teacher p, student q) and a position mask; the row
// kernels additionally return the gradient with respect to the student's
// logits, which is what adapter training backpropagates.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ctxmem/backend.hpp"
#include "ctxmem/linalg.hpp"

namespace ctxmem {

enum class LossKind { fkl, rkl, akl, dpkd, mse, seqkd };

inline std::string_view loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::fkl: return "fkl";
    case LossKind::rkl: return "rkl";
    case LossKind::akl: return "akl";
    case LossKind::dpkd: return "dpkd";
    case LossKind::mse: return "mse";
    case LossKind::seqkd: return "seqkd";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (auto k : {LossKind::fkl, LossKind::rkl, LossKind::akl, LossKind::dpkd, LossKind::mse, LossKind::seqkd})
    if (loss_kind_name(k) == s) return k;
  throw ConfigError("unknown loss '" + std::string(s) + "'");
}

/// true = position contributes. An empty mask selects every position.
using PositionMask = std::vector<bool>;

namespace losses {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline void check_shapes(const Matrix& a, const Matrix& b, const PositionMask& mask, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                      ")");
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(a.rows()))
    throw ConfigError(std::string(what) + ": mask length differs from position count");
}

inline bool active(const PositionMask& mask, Eigen::Index t) {
  return mask.empty() || mask[static_cast<std::size_t>(t)];
}

/// KL(a || b) for one row given probabilities and log-probabilities; zero-mass
/// entries of `a` contribute nothing.
inline double kl_row(const RowVector& a, const RowVector& la, const RowVector& lb) {
  double s = 0.0;
  for (Eigen::Index v = 0; v < a.size(); ++v)
    // Vectorized exp(-inf) can be a denormal rather than 0; test the log.
    if (la(v) != -kInf) s += a(v) * (la(v) - lb(v));
  return s;
}

/// Gradient of a loss through q = softmax(z): dz_j = q_j (g_j - sum_v q_v g_v).
inline RowVector through_softmax(const RowVector& q, const RowVector& g) {
  const double mean = (q.array() * g.array()).sum();
  return (q.array() * (g.array() - mean)).matrix();
}

// ---- row kernels on teacher/student log-probabilities --------------------

inline double fkl_row(const RowVector& lp, const RowVector& lq, RowVector* dz) {
  RowVector p = lp.array().exp();
  if (dz) *dz = lq.array().exp().matrix() - p;
  return kl_row(p, lp, lq);
}

inline double rkl_row(const RowVector& lp, const RowVector& lq, RowVector* dz) {
  RowVector q = lq.array().exp();
  const double r = kl_row(q, lq, lp);
  if (dz) {
    RowVector g = (lq - lp).array() + 1.0;
    for (Eigen::Index v = 0; v < q.size(); ++v)
      if (lq(v) == -kInf) g(v) = 0.0;
    *dz = through_softmax(q, g);
  }
  return r;
}

/// Head = minimal set of top teacher tokens whose mass reaches head_mass.
/// Ties in teacher probability are broken by smaller token index.
inline std::vector<bool> akl_head(const RowVector& p, double head_mass) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(p.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return p(a) > p(b); });
  std::vector<bool> head(order.size(), false);
  double mass = 0.0;
  for (auto v : order) {
    if (mass >= head_mass) break;
    head[static_cast<std::size_t>(v)] = true;
    mass += p(v);
  }
  return head;
}

inline double akl_row(const RowVector& lp, const RowVector& lq, double head_mass, RowVector* dz) {
  RowVector p = lp.array().exp(), q = lq.array().exp();
  auto head = akl_head(p, head_mass);
  double gh = 0.0, gt = 0.0;
  for (Eigen::Index v = 0; v < p.size(); ++v) (head[static_cast<std::size_t>(v)] ? gh : gt) += std::abs(p(v) - q(v));
  const double G = gh + gt;
  const double w = G > 0.0 ? gh / G : 0.5;
  RowVector dzf, dzr;
  const double f = fkl_row(lp, lq, dz ? &dzf : nullptr);
  const double r = rkl_row(lp, lq, dz ? &dzr : nullptr);
  if (dz) {
    *dz = w * dzf + (1.0 - w) * dzr;
    if (G > 0.0) {
      // w moves with q through the gaps: d|p_v - q_v|/dq_v = -sign(p_v - q_v).
      RowVector dw(q.size());
      for (Eigen::Index v = 0; v < q.size(); ++v) {
        const double d = p(v) - q(v);
        const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        dw(v) = head[static_cast<std::size_t>(v)] ? -sgn * gt / (G * G) : sgn * gh / (G * G);
      }
      *dz += (f - r) * through_softmax(q, dw);
    }
  }
  return w * f + (1.0 - w) * r;
}

inline double seqkd_row(const RowVector& lq, TokenId target, RowVector* dz) {
  if (dz) {
    *dz = lq.array().exp();
    (*dz)(target) -= 1.0;
  }
  return -lq(target);
}

inline double mse_row(const RowVector& th, const RowVector& sh, RowVector* dh) {
  RowVector d = sh - th;
  if (dh) *dh = 2.0 * d / static_cast<double>(d.size());
  return d.squaredNorm() / static_cast<double>(d.size());
}

inline Matrix safe_log(const Matrix& p) { return p.array().log(); }

template <typename RowFn>
double masked_mean(const Matrix& p, const Matrix& q, const PositionMask& mask, const char* what, RowFn&& fn) {
  check_shapes(p, q, mask, what);
  Matrix lp = safe_log(p), lq = safe_log(q);
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index t = 0; t < p.rows(); ++t) {
    if (!active(mask, t)) continue;
    sum += fn(RowVector(lp.row(t)), RowVector(lq.row(t)));
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace losses

// ---- value functions --------------------------------------------------------

/// Mean over unmasked positions of KL(teacher || student).
inline double loss_fkl(const Matrix& teacher, const Matrix& student, const PositionMask& mask = {}) {
  return losses::masked_mean(teacher, student, mask, "loss_fkl", [](const RowVector& lp, const RowVector& lq) {
    return losses::fkl_row(lp, lq, nullptr);
  });
}

/// Mean over unmasked positions of KL(student || teacher).
inline double loss_rkl(const Matrix& teacher, const Matrix& student, const PositionMask& mask = {}) {
  return losses::masked_mean(teacher, student, mask, "loss_rkl", [](const RowVector& lp, const RowVector& lq) {
    return losses::rkl_row(lp, lq, nullptr);
  });
}

/// Per-position blend w*FKL + (1-w)*RKL, w = head gap share of the total gap.
inline double loss_akl(const Matrix& teacher, const Matrix& student, const PositionMask& mask = {},
                       double head_mass = 0.5) {
  if (!(head_mass > 0.0 && head_mass < 1.0)) throw ConfigError("akl head_mass must be in (0, 1)");
  return losses::masked_mean(teacher, student, mask, "loss_akl", [&](const RowVector& lp, const RowVector& lq) {
    return losses::akl_row(lp, lq, head_mass, nullptr);
  });
}

/// Length-normalized sequence-level reverse KL of one response: the summed
/// per-position RKL divided by the unmasked-position count. Batches average
/// this per sequence rather than per token.
inline double loss_dpkd(const Matrix& teacher, const Matrix& student, const PositionMask& mask = {}) {
  return losses::masked_mean(teacher, student, mask, "loss_dpkd", [](const RowVector& lp, const RowVector& lq) {
    return losses::rkl_row(lp, lq, nullptr);
  });
}

/// Mean squared difference over unmasked positions and all dimensions.
inline double loss_mse(const Matrix& teacher_hidden, const Matrix& student_hidden, const PositionMask& mask = {}) {
  losses::check_shapes(teacher_hidden, student_hidden, mask, "loss_mse");
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index t = 0; t < teacher_hidden.rows(); ++t) {
    if (!losses::active(mask, t)) continue;
    sum += losses::mse_row(teacher_hidden.row(t), student_hidden.row(t), nullptr);
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

/// Mean negative log-likelihood of the teacher's response tokens under the student.
inline double loss_seqkd(std::span<const double> student_logprobs, const PositionMask& mask = {}) {
  if (!mask.empty() && mask.size() != student_logprobs.size())
    throw ConfigError("loss_seqkd: mask length differs from position count");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < student_logprobs.size(); ++t) {
    if (!mask.empty() && !mask[t]) continue;
    sum -= student_logprobs[t];
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// ---- training heads ---------------------------------------------------------

/// Teacher-side quantities for one response: log-probabilities over the
/// response rows, hidden states (MSE only) and the response tokens.
struct TeacherTargets {
  Matrix log_probs;
  Matrix hidden;
  TokenSequence response;
};

inline bool loss_uses_teacher_distribution(LossKind k) {
  return k == LossKind::fkl || k == LossKind::rkl || k == LossKind::akl || k == LossKind::dpkd;
}

/// Sum of per-position losses for one response, given student logits (and
/// hidden states for MSE). Fills `grads` with d(sum * scale)/d(outputs)
/// when non-null.
inline double response_loss_sum(LossKind kind, const TeacherTargets& teacher, const Matrix& student_logits,
                                const Matrix* student_hidden, double head_mass, double scale,
                                OutputGradients* grads) {
  const Eigen::Index T = student_logits.rows();
  if (static_cast<std::size_t>(T) != teacher.response.size())
    throw Error("student rows differ from response length");
  if (kind == LossKind::mse) {
    if (!student_hidden) throw Error("mse loss needs student hidden states");
    if (teacher.hidden.rows() != T || teacher.hidden.cols() != student_hidden->cols())
      throw ConfigError("loss_mse: hidden state shapes differ");
    double sum = 0.0;
    if (grads) grads->dhidden = Matrix(T, student_hidden->cols());
    for (Eigen::Index t = 0; t < T; ++t) {
      RowVector dh;
      sum += losses::mse_row(teacher.hidden.row(t), student_hidden->row(t), grads ? &dh : nullptr);
      if (grads) grads->dhidden.row(t) = scale * dh;
    }
    return sum;
  }
  Matrix lq = log_softmax_rows(student_logits);
  if (loss_uses_teacher_distribution(kind) && (teacher.log_probs.rows() != T || teacher.log_probs.cols() != lq.cols()))
    throw Error("teacher distribution shape differs from student");
  double sum = 0.0;
  if (grads) grads->dlogits = Matrix(T, lq.cols());
  for (Eigen::Index t = 0; t < T; ++t) {
    RowVector dz;
    RowVector* pdz = grads ? &dz : nullptr;
    const RowVector lqt = lq.row(t);
    switch (kind) {
      case LossKind::fkl: sum += losses::fkl_row(teacher.log_probs.row(t), lqt, pdz); break;
      case LossKind::rkl:
      case LossKind::dpkd: sum += losses::rkl_row(teacher.log_probs.row(t), lqt, pdz); break;
      case LossKind::akl: sum += losses::akl_row(teacher.log_probs.row(t), lqt, head_mass, pdz); break;
      case LossKind::seqkd: sum += losses::seqkd_row(lqt, teacher.response[static_cast<std::size_t>(t)], pdz); break;
      case LossKind::mse: break;
    }
    if (grads) grads->dlogits.row(t) = scale * dz;
  }
  return sum;
}

/// LossHead returning the response's loss sum times `scale`.
inline LossHead make_loss_head(LossKind kind, const TeacherTargets& teacher, double head_mass, double scale) {
  return [kind, &teacher, head_mass, scale](const Matrix& logits, const Matrix* hidden, OutputGradients& g) {
    return scale * response_loss_sum(kind, teacher, logits, hidden, head_mass, scale, &g);
  };
}

}  // namespace ctxmem
