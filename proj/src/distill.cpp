#include "hanjabridge/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "hanjabridge/kernels.hpp"
#include "hanjabridge/utf8.hpp"

namespace hb {

namespace {

double norm(std::span<const double> v) { return std::sqrt(kernels::dot(v.data(), v.data(), v.size())); }

std::vector<double> normalized(std::span<const double> v, bool normalize) {
  std::vector<double> out(v.begin(), v.end());
  if (!normalize) return out;
  const double n = norm(v);
  if (n == 0.0) throw DistillError("cannot normalize a zero-norm vector");
  for (auto& x : out) x /= n;
  return out;
}

// log-softmax of scores in place; returns the log-normalizer.
void log_softmax(std::vector<double>& s) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : s) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : s) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  for (auto& x : s) x -= lz;
}

}  // namespace

void DistillConfig::validate() const {
  if (!(tau_teacher > 0.0) || !(tau_student > 0.0)) throw DistillError("temperatures must be positive");
  if (queue_capacity == 0) throw DistillError("queue capacity must be positive");
}

// ----- queue -----

InstanceQueue::InstanceQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
  if (capacity == 0) throw DistillError("queue capacity must be positive");
}

void InstanceQueue::push(const QueueKey& key, std::span<const double> teacher_vector) {
  if (teacher_vector.size() != dim_) throw DistillError("queue: vector dimension mismatch");
  entries_.push_back({key, Source::teacher, {teacher_vector.begin(), teacher_vector.end()}});
  while (entries_.size() > capacity_) entries_.pop_front();
}

bool InstanceQueue::operator==(const InstanceQueue& o) const {
  if (capacity_ != o.capacity_ || dim_ != o.dim_ || entries_.size() != o.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!(entries_[i].key == o.entries_[i].key) || entries_[i].vector != o.entries_[i].vector) return false;
  }
  return true;
}

void enqueue_batch(InstanceQueue& queue, const std::vector<TeacherStates>& teacher_states,
                   const std::vector<AlignmentMap>& alignments) {
  if (teacher_states.size() != alignments.size()) throw DistillError("enqueue_batch: size mismatch");
  for (std::size_t b = 0; b < teacher_states.size(); ++b) {
    const auto& ts = teacher_states[b];
    for (const auto& [student_pos, teacher_pos] : alignments[b].pairs) {
      queue.push({ts.sequence, static_cast<std::uint32_t>(teacher_pos)}, ts.vectors.at(teacher_pos));
    }
  }
}

// ----- alignment -----

AlignmentMap align(const Encoding& student, const Encoding& teacher) {
  if (student.text != teacher.text) throw DistillError("align: encodings are of different texts");
  AlignmentMap map;
  std::unordered_map<std::size_t, std::size_t> teacher_by_start;
  for (std::size_t j = 0; j < teacher.spans.size(); ++j) teacher_by_start.emplace(teacher.spans[j].start, j);
  for (std::size_t i = 0; i < student.spans.size(); ++i) {
    const auto& s = student.spans[i];
    auto it = teacher_by_start.find(s.start);
    bool ok = false;
    std::size_t j = 0;
    if (it != teacher_by_start.end()) {
      j = it->second;
      // walk contiguous teacher tokens until the student span is covered
      while (teacher.spans[j].end < s.end && j + 1 < teacher.spans.size() &&
             teacher.spans[j + 1].start == teacher.spans[j].end) {
        ++j;
      }
      ok = teacher.spans[j].end == s.end;
    }
    if (ok) {
      map.pairs.emplace_back(i, j);
    } else {
      map.skipped.push_back(i);
    }
  }
  return map;
}

// ----- similarity -----

std::vector<double> sim_distribution(std::span<const double> z, const std::vector<std::span<const double>>& reference,
                                     double tau, bool normalize) {
  if (reference.empty()) throw DistillError("sim_distribution: empty reference set");
  if (!(tau > 0.0)) throw DistillError("sim_distribution: tau must be positive");
  const auto zn = normalized(z, normalize);
  std::vector<double> s(reference.size());
  for (std::size_t j = 0; j < reference.size(); ++j) {
    if (reference[j].size() != z.size()) throw DistillError("sim_distribution: dimension mismatch");
    const auto dn = normalized(reference[j], normalize);
    s[j] = kernels::dot(zn.data(), dn.data(), zn.size()) / tau;
  }
  log_softmax(s);
  for (auto& x : s) x = std::exp(x);
  return s;
}

QueueSnapshot::QueueSnapshot(const InstanceQueue& queue, bool normalize)
    : dim_(queue.dim()), normalize_(normalize) {
  keys_.reserve(queue.size());
  vectors_.reserve(queue.size() * dim_);
  for (const auto& e : queue.entries()) {
    keys_.push_back(e.key);
    const auto v = normalized(e.vector, normalize);
    vectors_.insert(vectors_.end(), v.begin(), v.end());
  }
}

std::pair<double, double> QueueSnapshot::position_loss(std::span<const double> student,
                                                       std::span<const double> teacher, const QueueKey& key,
                                                       const DistillConfig& config, std::span<double> grad,
                                                       double grad_scale) const {
  if (student.size() != dim_ || teacher.size() != dim_) {
    throw DistillError("kd: student/teacher dimension " + std::to_string(student.size()) + "/" +
                       std::to_string(teacher.size()) + " does not match queue dimension " + std::to_string(dim_));
  }
  const double student_norm = normalize_ ? norm(student) : 1.0;
  if (normalize_ && student_norm == 0.0) throw DistillError("kd: zero-norm student vector");
  const auto zs = normalized(student, normalize_);
  const auto zt = normalized(teacher, normalize_);

  // Reference rows: the current teacher vector first, then every queue entry with a different key.
  std::vector<const double*> refs;
  refs.reserve(keys_.size() + 1);
  refs.push_back(zt.data());
  for (std::size_t j = 0; j < keys_.size(); ++j) {
    if (keys_[j] == key) continue;
    refs.push_back(vectors_.data() + j * dim_);
  }
  const std::size_t m = refs.size();
  std::vector<double> lt(m), ls(m);
  for (std::size_t j = 0; j < m; ++j) {
    lt[j] = kernels::dot(zt.data(), refs[j], dim_) / config.tau_teacher;
    ls[j] = kernels::dot(zs.data(), refs[j], dim_) / config.tau_student;
  }
  log_softmax(lt);
  log_softmax(ls);
  double ce = 0.0, entropy = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double pt = std::exp(lt[j]);
    if (pt > 0.0) {
      ce -= pt * ls[j];
      entropy -= pt * lt[j];
    }
  }
  if (!grad.empty()) {
    // d ce / d zs_hat = sum_j (pS_j - pT_j) r_j / tau_S
    std::vector<double> g(dim_, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      const double coef = (std::exp(ls[j]) - std::exp(lt[j])) / config.tau_student;
      if (coef != 0.0) kernels::axpy(coef, refs[j], g.data(), dim_);
    }
    if (normalize_) {
      const double proj = kernels::dot(zs.data(), g.data(), dim_);
      for (std::size_t i = 0; i < dim_; ++i) grad[i] += grad_scale * (g[i] - zs[i] * proj) / student_norm;
    } else {
      for (std::size_t i = 0; i < dim_; ++i) grad[i] += grad_scale * g[i];
    }
  }
  return {ce, entropy};
}

KdResult kd_loss(const std::vector<std::vector<double>>& student, const std::vector<std::vector<double>>& teacher,
                 const std::vector<QueueKey>& keys, const InstanceQueue& queue, const DistillConfig& config) {
  config.validate();
  if (student.size() != teacher.size() || student.size() != keys.size()) {
    throw DistillError("kd_loss: student, teacher and key counts differ");
  }
  KdResult r;
  const std::size_t n = student.size();
  if (n == 0) return r;
  const QueueSnapshot snap(queue, config.normalize);
  const double scale = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> g(student[i].size(), 0.0);
    auto [ce, h] = snap.position_loss(student[i], teacher[i], keys[i], config, g, scale);
    r.per_position.push_back(ce);
    r.teacher_entropy.push_back(h);
    r.grad_student.push_back(std::move(g));
    r.loss += ce;
  }
  r.loss *= scale;
  return r;
}

// ----- teacher -----

template <typename T>
TeacherStates teacher_forward(const Params<T>& teacher, std::span<const TokenId> ids, std::uint64_t sequence,
                              int teacher_layer) {
  TeacherStates out;
  out.sequence = sequence;
  out.dim = teacher.config.d_model;
  if (ids.empty()) return out;
  Activations<T> act;
  forward(teacher, ids, AttentionMask::causal(ids.size()), act);
  const std::size_t d = teacher.config.d_model;
  const std::vector<T>* src = &act.final_hidden;
  if (teacher_layer >= 0) {
    const auto l = static_cast<std::size_t>(teacher_layer);
    if (l >= teacher.config.n_layers) throw DistillError("teacher_layer out of range");
    src = (l + 1 < teacher.config.n_layers) ? &act.layers[l + 1].x_in : &act.x_out;
  }
  out.vectors.resize(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    out.vectors[t].assign(src->begin() + static_cast<std::ptrdiff_t>(t * d),
                          src->begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
  }
  return out;
}

template TeacherStates teacher_forward<float>(const Params<float>&, std::span<const TokenId>, std::uint64_t, int);
template TeacherStates teacher_forward<double>(const Params<double>&, std::span<const TokenId>, std::uint64_t, int);

}  // namespace hb
