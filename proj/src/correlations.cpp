#include "optrad/correlations.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "optrad/contraction.hpp"
#include "optrad/error.hpp"

namespace optrad {

namespace {

long double log_fact(int n) { return std::lgamma(static_cast<long double>(n) + 1.0L); }

// Racah's closed form, summed in extended precision.
double racah_cg(int j1, int m1, int j2, int m2, int J, int M) {
  if (m1 + m2 != M) return 0.0;
  if (J < std::abs(j1 - j2) || J > j1 + j2) return 0.0;
  if (std::abs(m1) > j1 || std::abs(m2) > j2 || std::abs(M) > J) return 0.0;
  const long double pre =
      0.5L * (std::log(static_cast<long double>(2 * J + 1)) +
              log_fact(J + j1 - j2) + log_fact(J - j1 + j2) +
              log_fact(j1 + j2 - J) - log_fact(j1 + j2 + J + 1) +
              log_fact(J + M) + log_fact(J - M) + log_fact(j1 - m1) +
              log_fact(j1 + m1) + log_fact(j2 - m2) + log_fact(j2 + m2));
  const int kmin = std::max({0, j2 - J - m1, j1 - J + m2});
  const int kmax = std::min({j1 + j2 - J, j1 - m1, j2 + m2});
  long double sum = 0.0L;
  for (int k = kmin; k <= kmax; ++k) {
    const long double den = log_fact(k) + log_fact(j1 + j2 - J - k) +
                            log_fact(j1 - m1 - k) + log_fact(j2 + m2 - k) +
                            log_fact(J - j2 + m1 + k) +
                            log_fact(J - j1 - m2 + k);
    const long double term = std::exp(pre - den);
    sum += (k % 2 == 0) ? term : -term;
  }
  return static_cast<double>(sum);
}

}  // namespace

CGTable::CGTable(int lmax_coupling) : lmax_(lmax_coupling) {
  if (lmax_ < 0 || lmax_ > 12) {
    throw ValidationError("correlations",
                          "lmax_coupling must lie in [0, 12], got " +
                              std::to_string(lmax_));
  }
  const std::size_t n = static_cast<std::size_t>(lmax_ + 1);
  const std::size_t w = static_cast<std::size_t>(2 * lmax_ + 1);
  data_.assign(n * n * n * w * w, 0.0);
  for (int l1 = 0; l1 <= lmax_; ++l1) {
    for (int l2 = 0; l2 <= lmax_; ++l2) {
      for (int L = std::abs(l1 - l2); L <= std::min(l1 + l2, lmax_); ++L) {
        const std::size_t base = offset(l1, l2, L);
        for (int m1 = -l1; m1 <= l1; ++m1) {
          for (int m2 = -l2; m2 <= l2; ++m2) {
            if (std::abs(m1 + m2) > L) continue;
            data_[base + static_cast<std::size_t>(m1 + lmax_) * w +
                  static_cast<std::size_t>(m2 + lmax_)] =
                racah_cg(l1, m1, l2, m2, L, m1 + m2);
          }
        }
      }
    }
  }
}

std::size_t CGTable::offset(int l1, int l2, int L) const {
  const std::size_t n = static_cast<std::size_t>(lmax_ + 1);
  const std::size_t w = static_cast<std::size_t>(2 * lmax_ + 1);
  return ((static_cast<std::size_t>(l1) * n + static_cast<std::size_t>(l2)) *
              n +
          static_cast<std::size_t>(L)) *
         w * w;
}

double CGTable::operator()(int l1, int m1, int l2, int m2, int L,
                           int M) const {
  if (l1 < 0 || l2 < 0 || L < 0 || l1 > lmax_ || l2 > lmax_ || L > lmax_) {
    throw ValidationError("correlations",
                          "angular momentum exceeds the coupling table");
  }
  if (m1 + m2 != M || std::abs(m1) > l1 || std::abs(m2) > l2 ||
      std::abs(M) > L || L < std::abs(l1 - l2) || L > l1 + l2) {
    return 0.0;
  }
  const std::size_t w = static_cast<std::size_t>(2 * lmax_ + 1);
  return data_[offset(l1, l2, L) + static_cast<std::size_t>(m1 + lmax_) * w +
               static_cast<std::size_t>(m2 + lmax_)];
}

CGTable cg_table(int lmax_coupling) { return CGTable(lmax_coupling); }

std::string to_string(const FeaturePath& path) {
  std::ostringstream os;
  for (std::size_t i = 0; i < path.size(); ++i) {
    const auto& p = path[i];
    if (i) os << '|';
    if (p.l < 0) {
      os << "pc" << p.channel << "(s=" << p.s << ",k=" << p.k << ")";
    } else if (p.k < 0) {
      os << "n" << p.channel << "l" << p.l;
    } else {
      os << "n" << p.channel << "l" << p.l << "k" << p.k
         << (p.s > 0 ? "+" : "-");
    }
  }
  return os.str();
}

int BlockLayout::find(int sigma, int lambda) const {
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].sigma == sigma && groups[g].lambda == lambda) {
      return static_cast<int>(g);
    }
  }
  return -1;
}

std::size_t BlockLayout::feature_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.labels.size();
  return n;
}

namespace {

json path_to_json(const FeaturePath& path) {
  json j = json::array();
  for (const auto& p : path) j.push_back({p.channel, p.l, p.k, p.s});
  return j;
}

FeaturePath path_from_json(const json& j) {
  FeaturePath path;
  for (const auto& s : j) {
    if (!s.is_array() || s.size() != 4) {
      throw ValidationError("correlations", "malformed feature label");
    }
    path.push_back({s[0].get<int>(), s[1].get<int>(), s[2].get<int>(),
                    s[3].get<int>()});
  }
  return path;
}

void check_same_layout(const EquivariantBlock& b,
                       const std::shared_ptr<const BlockLayout>& layout,
                       const char* what) {
  if (!b.layout) throw ValidationError("correlations", "block has no layout");
  if (b.layout == layout) return;
  const auto& a = *b.layout;
  bool same = a.order == layout->order && a.groups.size() == layout->groups.size();
  for (std::size_t g = 0; same && g < a.groups.size(); ++g) {
    same = a.groups[g].sigma == layout->groups[g].sigma &&
           a.groups[g].lambda == layout->groups[g].lambda &&
           a.groups[g].labels == layout->groups[g].labels;
  }
  if (!same) {
    throw ValidationError("correlations",
                          std::string(what) + " does not match the layout");
  }
}

}  // namespace

Blob InvariantFeatures::to_blob() const {
  Blob b;
  json labs = json::array();
  for (const auto& p : labels) labs.push_back(path_to_json(p));
  b.header = {{"kind", "features"},
              {"order", order},
              {"basis_id", basis_id},
              {"rows", values.rows()},
              {"cols", values.cols()},
              {"labels", labs}};
  b.payload.resize(static_cast<std::size_t>(values.size()));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) b.payload[k++] = values(i, j);
  }
  return b;
}

InvariantFeatures InvariantFeatures::from_blob(const Blob& blob) {
  const auto& h = blob.header;
  if (h.value("kind", "") != "features") {
    throw ValidationError("correlations", "blob is not a feature matrix");
  }
  InvariantFeatures f;
  f.order = h.at("order").get<int>();
  f.basis_id = h.at("basis_id").get<std::string>();
  const auto rows = h.at("rows").get<Eigen::Index>();
  const auto cols = h.at("cols").get<Eigen::Index>();
  for (const auto& p : h.at("labels")) f.labels.push_back(path_from_json(p));
  if (static_cast<Eigen::Index>(f.labels.size()) != cols ||
      static_cast<Eigen::Index>(blob.payload.size()) != rows * cols) {
    throw ValidationError("correlations", "feature blob size mismatch");
  }
  f.values.resize(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) f.values(i, j) = blob.payload[k++];
  }
  return f;
}

std::shared_ptr<const BlockLayout> seed_layout(const std::vector<int>& channels_per_l) {
  auto layout = std::make_shared<BlockLayout>();
  layout->order = 1;
  for (std::size_t l = 0; l < channels_per_l.size(); ++l) {
    BlockGroup g;
    g.sigma = 1;
    g.lambda = static_cast<int>(l);
    for (int n = 0; n < channels_per_l[l]; ++n) {
      g.labels.push_back({{n, static_cast<int>(l), -1, 0}});
    }
    layout->groups.push_back(std::move(g));
  }
  return layout;
}

std::shared_ptr<const BlockLayout> seed_layout(const DensityCoeffs& c) {
  std::vector<int> counts;
  for (int l = 0; l <= c.lmax(); ++l) counts.push_back(c.channel_count(l));
  return seed_layout(counts);
}

EquivariantBlock seed_block(const DensityCoeffs& c,
                            std::shared_ptr<const BlockLayout> layout) {
  if (!layout || layout->order != 1 ||
      static_cast<int>(layout->groups.size()) != c.lmax() + 1) {
    throw ValidationError("correlations", "seed layout does not fit coefficients");
  }
  EquivariantBlock b;
  b.values.resize(layout->groups.size());
  for (int l = 0; l <= c.lmax(); ++l) {
    const auto& src = c.values[static_cast<std::size_t>(l)];
    if (static_cast<std::size_t>(src.rows()) !=
        layout->groups[static_cast<std::size_t>(l)].labels.size()) {
      throw ValidationError("correlations", "seed layout channel count mismatch");
    }
    b.values[static_cast<std::size_t>(l)] = src.rowwise().reverse();
  }
  b.layout = std::move(layout);
  return b;
}

EquivariantBlock seed_block(const DensityCoeffs& c) {
  return seed_block(c, seed_layout(c));
}

CouplingPlan::CouplingPlan(std::shared_ptr<const BlockLayout> seed,
                           std::shared_ptr<const BlockLayout> prev,
                           const CGTable& cg, int lambda_max_out)
    : seed_(std::move(seed)), prev_(std::move(prev)) {
  if (!seed_ || !prev_) throw ValidationError("correlations", "missing layout");
  if (seed_->order != 1) {
    throw ValidationError("correlations", "seed layout must have order 1");
  }
  if (lambda_max_out < 0) {
    throw ValidationError("correlations", "lambda_max must be >= 0");
  }
  struct Pending {
    std::vector<FeaturePath> labels;
    std::vector<Op> ops;
  };
  // (lambda, -sigma): lambda ascending, sigma = +1 first
  std::map<std::pair<int, int>, Pending> pending;
  std::map<std::tuple<int, int, int>, int> term_index;
  for (std::size_t sg = 0; sg < seed_->groups.size(); ++sg) {
    const auto& sgrp = seed_->groups[sg];
    const int l = sgrp.lambda;
    for (std::size_t sr = 0; sr < sgrp.labels.size(); ++sr) {
      const auto& slab = sgrp.labels[sr];
      for (std::size_t pg = 0; pg < prev_->groups.size(); ++pg) {
        const auto& pgrp = prev_->groups[pg];
        const int k = pgrp.lambda;
        const int s = pgrp.sigma;
        for (std::size_t pr = 0; pr < pgrp.labels.size(); ++pr) {
          for (int lam = std::abs(l - k); lam <= std::min(l + k, lambda_max_out);
               ++lam) {
            if (std::max({l, k, lam}) > cg.lmax()) {
              throw ValidationError(
                  "correlations",
                  "coupling requires l = " + std::to_string(std::max({l, k, lam})) +
                      " beyond lmax_coupling = " + std::to_string(cg.lmax()));
            }
            const int sigma = ((l + k + lam) % 2 == 0) ? s : -s;
            auto key = std::make_tuple(l, k, lam);
            auto it = term_index.find(key);
            if (it == term_index.end()) {
              std::vector<Term> terms;
              for (int mu = -lam; mu <= lam; ++mu) {
                for (int m = std::max(-l, mu - k); m <= std::min(l, mu + k); ++m) {
                  const double c = cg(l, m, k, mu - m, lam, mu);
                  if (c != 0.0) terms.push_back({mu + lam, m + l, mu - m + k, c});
                }
              }
              term_sets_.push_back(std::move(terms));
              it = term_index.emplace(key, static_cast<int>(term_sets_.size()) - 1)
                       .first;
            }
            auto& dst = pending[{lam, -sigma}];
            FeaturePath path = pgrp.labels[pr];
            PathStep step = slab.front();
            step.k = k;
            step.s = s;
            path.push_back(step);
            dst.labels.push_back(std::move(path));
            dst.ops.push_back({static_cast<int>(sg), static_cast<int>(sr),
                               static_cast<int>(pg), static_cast<int>(pr),
                               it->second});
          }
        }
      }
    }
  }
  auto out = std::make_shared<BlockLayout>();
  out->order = prev_->order + 1;
  for (auto& [key, p] : pending) {
    BlockGroup g;
    g.lambda = key.first;
    g.sigma = -key.second;
    g.labels = std::move(p.labels);
    out->groups.push_back(std::move(g));
    ops_.push_back(std::move(p.ops));
  }
  out_ = std::move(out);
}

EquivariantBlock CouplingPlan::apply(const EquivariantBlock& seed,
                                     const EquivariantBlock& prev) const {
  check_same_layout(seed, seed_, "seed block");
  check_same_layout(prev, prev_, "previous-order block");
  EquivariantBlock out;
  out.layout = out_;
  out.values.resize(out_->groups.size());
  for (std::size_t g = 0; g < out_->groups.size(); ++g) {
    const int lam = out_->groups[g].lambda;
    auto& M = out.values[g];
    M = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(ops_[g].size()),
                               2 * lam + 1);
    for (std::size_t f = 0; f < ops_[g].size(); ++f) {
      const auto& op = ops_[g][f];
      const auto& S = seed.values[static_cast<std::size_t>(op.seed_group)];
      const auto& P = prev.values[static_cast<std::size_t>(op.prev_group)];
      for (const auto& t : term_sets_[static_cast<std::size_t>(op.terms)]) {
        M(static_cast<Eigen::Index>(f), t.mu) +=
            t.cg * S(op.seed_row, t.seed_col) * P(op.prev_row, t.prev_col);
      }
    }
  }
  return out;
}

EquivariantBlock BlockTruncation::apply(const EquivariantBlock& block) const {
  check_same_layout(block, source, "block");
  EquivariantBlock out;
  out.layout = target;
  out.values.resize(target->groups.size());
  for (std::size_t g = 0; g < target->groups.size(); ++g) {
    out.values[g] =
        U[g] * block.values[static_cast<std::size_t>(source_group[g])];
  }
  return out;
}

EquivariantBlock nice_iterate(const EquivariantBlock& prev,
                              const DensityCoeffs& c, const CGTable& cg,
                              int lambda_max_out, const BlockTruncation* keep) {
  const auto seed = seed_block(c);
  const CouplingPlan plan(seed.layout, prev.layout, cg, lambda_max_out);
  auto next = plan.apply(seed, prev);
  if (keep) return keep->apply(next);
  return next;
}

double block_norm(const EquivariantBlock& block) {
  double s = 0.0;
  for (const auto& v : block.values) s += v.squaredNorm();
  return s;
}

std::vector<Eigen::VectorXd> feature_norms(const EquivariantBlock& block) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& v : block.values) out.push_back(v.rowwise().squaredNorm());
  return out;
}

namespace {

std::shared_ptr<const BlockLayout> truncated_layout(
    const BlockLayout& source, const std::vector<int>& source_group,
    const std::vector<Eigen::MatrixXd>& U) {
  auto target = std::make_shared<BlockLayout>();
  target->order = source.order;
  for (std::size_t t = 0; t < source_group.size(); ++t) {
    const auto& grp = source.groups[static_cast<std::size_t>(source_group[t])];
    BlockGroup tg;
    tg.sigma = grp.sigma;
    tg.lambda = grp.lambda;
    for (Eigen::Index q = 0; q < U[t].rows(); ++q) {
      tg.labels.push_back({{static_cast<int>(q), -1, grp.lambda, grp.sigma}});
    }
    target->groups.push_back(std::move(tg));
  }
  return target;
}

}  // namespace

TruncationResult variance_truncation(const std::vector<EquivariantBlock>& blocks,
                                     int n_keep) {
  if (n_keep < 1) throw ValidationError("correlations", "n_keep must be >= 1");
  if (blocks.empty()) {
    throw ValidationError("correlations", "variance truncation needs samples");
  }
  TruncationResult res;
  const auto& layout = blocks.front().layout;
  for (const auto& b : blocks) check_same_layout(b, layout, "block");
  auto& tr = res.transform;
  tr.source = layout;
  double total = 0.0, discarded = 0.0;
  for (std::size_t g = 0; g < layout->groups.size(); ++g) {
    const auto& grp = layout->groups[g];
    const auto d = static_cast<Eigen::Index>(grp.labels.size());
    Eigen::Index samples = 0;
    for (const auto& b : blocks) samples += 2 * b.values[g].cols();
    Eigen::VectorXd vals;
    Eigen::MatrixXd vecs;
    Eigen::Index usable = d;
    if (samples < d) {
      // C = A A^T with A = [Re V, Im V]; nonzero eigenpairs from A^T A
      Eigen::MatrixXd A(d, samples);
      Eigen::Index col = 0;
      for (const auto& b : blocks) {
        const auto& V = b.values[g];
        A.middleCols(col, V.cols()) = V.real();
        A.middleCols(col + V.cols(), V.cols()) = V.imag();
        col += 2 * V.cols();
      }
      const Eigen::MatrixXd G = A.transpose() * A;
      Eigen::VectorXd gv;
      Eigen::MatrixXd gvec;
      sorted_eigensystem(0.5 * (G + G.transpose()), gv, gvec);
      const double top = gv.size() ? std::max(gv[0], 0.0) : 0.0;
      usable = 0;
      while (usable < gv.size() && gv[usable] > 1e-12 * top) ++usable;
      vals = Eigen::VectorXd::Zero(d);
      vals.head(usable) = gv.head(usable);
      vecs.resize(d, usable);
      for (Eigen::Index k = 0; k < usable; ++k) {
        Eigen::VectorXd v = A * gvec.col(k) / std::sqrt(gv[k]);
        v.normalize();
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v[imax] < 0) v = -v;
        vecs.col(k) = v;
      }
    } else {
      Eigen::MatrixXd C = Eigen::MatrixXd::Zero(d, d);
      for (const auto& b : blocks) {
        const auto& V = b.values[g];
        C.noalias() += (V * V.adjoint()).real();
      }
      C = 0.5 * (C + C.transpose()).eval();
      sorted_eigensystem(C, vals, vecs);
    }
    vals = vals.cwiseMax(0.0);
    tr.eigenvalues.push_back(vals);
    if (n_keep > d) {
      res.warnings.push_back("group (sigma=" + std::to_string(grp.sigma) +
                             ", lambda=" + std::to_string(grp.lambda) +
                             "): n_keep=" + std::to_string(n_keep) +
                             " exceeds the " + std::to_string(d) +
                             " available features; keeping all");
    }
    Eigen::Index kept = std::min<Eigen::Index>(n_keep, d);
    if (kept > usable) {
      res.warnings.push_back("group (sigma=" + std::to_string(grp.sigma) +
                             ", lambda=" + std::to_string(grp.lambda) + "): only " +
                             std::to_string(usable) +
                             " directions carry variance; keeping those");
      kept = usable;
    }
    total += vals.sum();
    discarded += vals.tail(d - kept).sum();
    if (kept == 0) continue;
    tr.source_group.push_back(static_cast<int>(g));
    tr.U.push_back(vecs.leftCols(kept).transpose());
  }
  tr.discarded_fraction = total > 0.0 ? discarded / total : 0.0;
  tr.target = truncated_layout(*layout, tr.source_group, tr.U);
  res.blocks.reserve(blocks.size());
  for (const auto& b : blocks) res.blocks.push_back(tr.apply(b));
  return res;
}

EquivariantBlock transform_channels(const EquivariantBlock& block, int step,
                                    const std::vector<Eigen::MatrixXd>& U_per_l) {
  if (!block.layout) throw ValidationError("correlations", "block has no layout");
  EquivariantBlock out;
  auto layout = std::make_shared<BlockLayout>();
  layout->order = block.layout->order;
  for (std::size_t g = 0; g < block.layout->groups.size(); ++g) {
    const auto& grp = block.layout->groups[g];
    // group features that differ only in the channel of `step`
    std::vector<FeaturePath> keys;
    std::map<FeaturePath, std::map<int, Eigen::Index>> rows;
    for (std::size_t f = 0; f < grp.labels.size(); ++f) {
      FeaturePath key = grp.labels[f];
      if (step < 0 || step >= static_cast<int>(key.size())) {
        throw ValidationError("correlations", "path step out of range");
      }
      const auto& st = key[static_cast<std::size_t>(step)];
      if (st.l < 0 || st.l >= static_cast<int>(U_per_l.size())) {
        throw ValidationError("correlations",
                              "no channel transform for this path step");
      }
      const int n = st.channel;
      key[static_cast<std::size_t>(step)].channel = -1;
      auto [it, fresh] = rows.try_emplace(key);
      if (fresh) keys.push_back(key);
      it->second[n] = static_cast<Eigen::Index>(f);
    }
    BlockGroup og;
    og.sigma = grp.sigma;
    og.lambda = grp.lambda;
    std::vector<Eigen::RowVectorXcd> vals;
    for (const auto& key : keys) {
      const int l = key[static_cast<std::size_t>(step)].l;
      const auto& U = U_per_l[static_cast<std::size_t>(l)];
      const auto& present = rows[key];
      if (static_cast<Eigen::Index>(present.size()) != U.cols()) {
        throw ValidationError("correlations",
                              "channel transform needs every input channel");
      }
      for (Eigen::Index q = 0; q < U.rows(); ++q) {
        Eigen::RowVectorXcd v = Eigen::RowVectorXcd::Zero(2 * grp.lambda + 1);
        for (const auto& [n, r] : present) {
          if (n < 0 || n >= U.cols()) {
            throw ValidationError("correlations", "channel index out of range");
          }
          v += U(q, n) * block.values[g].row(r);
        }
        FeaturePath lab = key;
        lab[static_cast<std::size_t>(step)].channel = static_cast<int>(q);
        og.labels.push_back(std::move(lab));
        vals.push_back(std::move(v));
      }
    }
    Eigen::MatrixXcd M(static_cast<Eigen::Index>(vals.size()), 2 * grp.lambda + 1);
    for (std::size_t i = 0; i < vals.size(); ++i) M.row(static_cast<Eigen::Index>(i)) = vals[i];
    layout->groups.push_back(std::move(og));
    out.values.push_back(std::move(M));
  }
  out.layout = std::move(layout);
  return out;
}

Eigen::MatrixXd weighted_covariance(const std::vector<DensityCoeffs>& coeffs,
                                    const std::vector<double>& weights, int l) {
  if (coeffs.size() != weights.size()) {
    throw ValidationError("correlations", "one weight per environment required");
  }
  if (coeffs.empty()) throw ValidationError("correlations", "no environments");
  if (l < 0 || l > coeffs.front().lmax()) {
    throw ValidationError("correlations", "l out of range");
  }
  const auto d = coeffs.front().channel_count(l);
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < coeffs.size(); ++i) {
    const auto& V = coeffs[i].values[static_cast<std::size_t>(l)];
    if (V.rows() != d) {
      throw ValidationError("correlations", "inconsistent channel counts");
    }
    C.noalias() += weights[i] * (V * V.adjoint()).real();
  }
  return 0.5 * (C + C.transpose());
}

Eigen::MatrixXd weighted_covariance(const std::vector<DensityCoeffs>& coeffs,
                                    const std::vector<EquivariantBlock>& prev,
                                    int s, int k, int feature, int l) {
  if (coeffs.size() != prev.size()) {
    throw ValidationError("correlations", "one block per environment required");
  }
  std::vector<double> w;
  w.reserve(prev.size());
  for (const auto& b : prev) {
    const int g = b.layout->find(s, k);
    if (g < 0 || feature < 0 ||
        feature >= b.values[static_cast<std::size_t>(g)].rows()) {
      throw ValidationError("correlations", "requested feature not in block");
    }
    w.push_back(b.values[static_cast<std::size_t>(g)].row(feature).squaredNorm());
  }
  return weighted_covariance(coeffs, w, l);
}

Eigen::VectorXd invariants(const EquivariantBlock& block) {
  const int g = block.layout->find(1, 0);
  if (g < 0) return Eigen::VectorXd();
  const auto& V = block.values[static_cast<std::size_t>(g)];
  const double scale = std::max(1.0, V.cwiseAbs().maxCoeff());
  const Eigen::VectorXd im = V.col(0).imag();
  if (im.size() && im.cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw RuntimeError("correlations", "invariant features are not real");
  }
  return V.col(0).real();
}

std::vector<FeaturePath> invariant_labels(const BlockLayout& layout) {
  const int g = layout.find(1, 0);
  if (g < 0) return {};
  return layout.groups[static_cast<std::size_t>(g)].labels;
}

namespace {

// W(k, m) = (-1)^m V(k, -m)
Eigen::MatrixXcd partner(const Eigen::MatrixXcd& V, int l) {
  Eigen::MatrixXcd W = V.rowwise().reverse();
  for (int m = -l; m <= l; ++m) {
    if ((m % 2) != 0) W.col(m + l) *= -1.0;
  }
  return W;
}

template <typename F>
void for_each_pair(const DensityCoeffs& c, F&& f) {
  Eigen::Index col = 0;
  for (int l = 0; l <= c.lmax(); ++l) {
    const int n = c.channel_count(l);
    for (int k1 = 0; k1 < n; ++k1) {
      for (int k2 = k1; k2 < n; ++k2) f(l, k1, k2, col++);
    }
  }
}

std::size_t powerspectrum_size(const DensityCoeffs& c) {
  std::size_t n = 0;
  for (int l = 0; l <= c.lmax(); ++l) {
    const auto k = static_cast<std::size_t>(c.channel_count(l));
    n += k * (k + 1) / 2;
  }
  return n;
}

// unique atoms touched by the gradients, center included, each with the
// summed coefficient derivatives
std::map<int, std::vector<std::array<Eigen::MatrixXcd, 3>>> gradients_by_atom(
    const CoeffGradients& g) {
  std::map<int, std::vector<std::array<Eigen::MatrixXcd, 3>>> out;
  auto add = [&](int atom, const std::vector<std::array<Eigen::MatrixXcd, 3>>& d) {
    auto [it, fresh] = out.try_emplace(atom, d);
    if (!fresh) {
      for (std::size_t l = 0; l < d.size(); ++l) {
        for (int x = 0; x < 3; ++x) it->second[l][x] += d[l][x];
      }
    }
  };
  add(g.center, g.center_gradient);
  for (std::size_t j = 0; j < g.neighbor_atoms.size(); ++j) {
    add(g.neighbor_atoms[j], g.neighbor[j]);
  }
  return out;
}

}  // namespace

Eigen::VectorXd powerspectrum(const DensityCoeffs& c) {
  Eigen::VectorXd p(static_cast<Eigen::Index>(powerspectrum_size(c)));
  std::vector<Eigen::MatrixXd> P;
  for (int l = 0; l <= c.lmax(); ++l) {
    const auto& V = c.values[static_cast<std::size_t>(l)];
    P.push_back((V * partner(V, l).transpose()).real() /
                std::sqrt(2.0 * l + 1.0));
  }
  for_each_pair(c, [&](int l, int k1, int k2, Eigen::Index col) {
    const double w = k1 == k2 ? 1.0 : std::sqrt(2.0);
    p[col] = w * P[static_cast<std::size_t>(l)](k1, k2);
  });
  return p;
}

std::vector<FeaturePath> powerspectrum_labels(const DensityCoeffs& c) {
  std::vector<FeaturePath> out;
  for_each_pair(c, [&](int l, int k1, int k2, Eigen::Index) {
    out.push_back({{k1, l, -1, 0}, {k2, l, l, 1}});
  });
  return out;
}

Eigen::VectorXd radial_spectrum(const DensityCoeffs& c) {
  return c.values.front().col(0).real();
}

std::vector<FeaturePath> radial_spectrum_labels(const DensityCoeffs& c) {
  std::vector<FeaturePath> out;
  for (int n = 0; n < c.channel_count(0); ++n) out.push_back({{n, 0, -1, 0}});
  return out;
}

FeatureGradients radial_spectrum_gradients(const DensityCoeffs& c,
                                           const CoeffGradients& g) {
  const auto by_atom = gradients_by_atom(g);
  FeatureGradients out;
  out.values.resize(3 * static_cast<Eigen::Index>(by_atom.size()),
                    c.channel_count(0));
  Eigen::Index a = 0;
  for (const auto& [atom, d] : by_atom) {
    out.atoms.push_back(atom);
    for (int x = 0; x < 3; ++x) {
      out.values.row(3 * a + x) = d.front()[x].col(0).real().transpose();
    }
    ++a;
  }
  return out;
}

FeatureGradients powerspectrum_gradients(const DensityCoeffs& c,
                                         const CoeffGradients& g) {
  const auto by_atom = gradients_by_atom(g);
  FeatureGradients out;
  out.values.resize(3 * static_cast<Eigen::Index>(by_atom.size()),
                    static_cast<Eigen::Index>(powerspectrum_size(c)));
  std::vector<Eigen::MatrixXcd> W;
  for (int l = 0; l <= c.lmax(); ++l) {
    W.push_back(partner(c.values[static_cast<std::size_t>(l)], l));
  }
  Eigen::Index a = 0;
  for (const auto& [atom, d] : by_atom) {
    out.atoms.push_back(atom);
    for (int x = 0; x < 3; ++x) {
      std::vector<Eigen::MatrixXd> dP;
      for (int l = 0; l <= c.lmax(); ++l) {
        const auto& V = c.values[static_cast<std::size_t>(l)];
        const auto& dV = d[static_cast<std::size_t>(l)][x];
        dP.push_back(((dV * W[static_cast<std::size_t>(l)].transpose()) +
                      (V * partner(dV, l).transpose()))
                         .real() /
                     std::sqrt(2.0 * l + 1.0));
      }
      for_each_pair(c, [&](int l, int k1, int k2, Eigen::Index col) {
        const double w = k1 == k2 ? 1.0 : std::sqrt(2.0);
        out.values(3 * a + x, col) = w * dP[static_cast<std::size_t>(l)](k1, k2);
      });
    }
    ++a;
  }
  return out;
}

void NiceSettings::validate() const {
  if (nu_max < 1) throw ValidationError("correlations", "nu_max must be >= 1");
  if (n_keep < 1) throw ValidationError("correlations", "n_keep must be >= 1");
  if (lambda_max < -1) {
    throw ValidationError("correlations", "lambda_max must be >= 0 (or -1)");
  }
  if (lmax_coupling < 0 || lmax_coupling > 12) {
    throw ValidationError("correlations", "lmax_coupling must lie in [0, 12]");
  }
}

json to_json(const NiceSettings& s) {
  return {{"nu_max", s.nu_max},
          {"lambda_max", s.lambda_max},
          {"n_keep", s.n_keep},
          {"lmax_coupling", s.lmax_coupling}};
}

NiceSettings nice_settings_from_json(const json& j) {
  NiceSettings s;
  try {
    s.nu_max = j.at("nu_max").get<int>();
    s.lambda_max = j.at("lambda_max").get<int>();
    s.n_keep = j.at("n_keep").get<int>();
    s.lmax_coupling = j.at("lmax_coupling").get<int>();
  } catch (const json::exception& e) {
    throw ValidationError("correlations", std::string("bad NICE settings: ") + e.what());
  }
  s.validate();
  return s;
}

void NiceFeaturizer::build_plans() {
  cg_ = std::make_shared<CGTable>(settings_.lmax_coupling);
  seed_ = seed_layout(channels_per_l_);
  plans_.clear();
  auto prev = seed_;
  for (int nu = 2; nu <= settings_.nu_max; ++nu) {
    const int lam = nu == settings_.nu_max ? 0 : lambda_mid_;
    auto plan = std::make_shared<CouplingPlan>(seed_, prev, *cg_, lam);
    const auto k = static_cast<std::size_t>(nu - 2);
    if (k < truncations_.size() && truncations_[k]) {
      auto& tr = *truncations_[k];
      tr.source = plan->layout();
      for (std::size_t t = 0; t < tr.U.size(); ++t) {
        const int g = tr.source_group[t];
        if (g < 0 || g >= static_cast<int>(tr.source->groups.size()) ||
            static_cast<std::size_t>(tr.U[t].cols()) !=
                tr.source->groups[static_cast<std::size_t>(g)].labels.size()) {
          throw ValidationError("correlations", "NICE truncation shape mismatch");
        }
      }
      tr.target = truncated_layout(*tr.source, tr.source_group, tr.U);
      prev = tr.target;
    } else {
      prev = plan->layout();
    }
    plans_.push_back(std::move(plan));
  }
}

namespace {

InvariantFeatures empty_invariants(int order, const std::string& basis_id,
                                   const BlockLayout& layout, std::size_t rows) {
  InvariantFeatures f;
  f.order = order;
  f.basis_id = basis_id;
  f.labels = invariant_labels(layout);
  f.values.resize(static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(f.labels.size()));
  return f;
}

std::vector<int> channel_counts(const std::vector<DensityCoeffs>& coeffs) {
  if (coeffs.empty()) throw ValidationError("correlations", "no environments");
  std::vector<int> counts;
  for (int l = 0; l <= coeffs.front().lmax(); ++l) {
    counts.push_back(coeffs.front().channel_count(l));
  }
  for (const auto& c : coeffs) {
    bool same = c.lmax() + 1 == static_cast<int>(counts.size());
    for (int l = 0; same && l <= c.lmax(); ++l) {
      same = c.channel_count(l) == counts[static_cast<std::size_t>(l)];
    }
    if (!same) {
      throw ValidationError("correlations",
                            "environments have inconsistent channel counts");
    }
  }
  return counts;
}

}  // namespace

NiceFeaturizer NiceFeaturizer::fit(const std::vector<DensityCoeffs>& coeffs,
                                   const NiceSettings& settings, int workers,
                                   NiceOutput* train_output,
                                   std::vector<std::string>* warnings) {
  settings.validate();
  NiceFeaturizer nf;
  nf.settings_ = settings;
  nf.channels_per_l_ = channel_counts(coeffs);
  nf.basis_id_ = coeffs.front().basis_id;
  const int lmax = static_cast<int>(nf.channels_per_l_.size()) - 1;
  nf.lambda_mid_ = settings.lambda_max < 0 ? lmax : settings.lambda_max;
  nf.cg_ = std::make_shared<CGTable>(settings.lmax_coupling);
  nf.seed_ = seed_layout(nf.channels_per_l_);
  nf.discarded_.assign(1, 0.0);

  const std::size_t n = coeffs.size();
  NiceOutput out;
  out.norms_full.resize(static_cast<Eigen::Index>(n), settings.nu_max);
  out.norms_kept.resize(static_cast<Eigen::Index>(n), settings.nu_max);
  std::vector<EquivariantBlock> seeds(n);
  parallel_for(n, workers, [&](std::size_t i) {
    seeds[i] = seed_block(coeffs[i], nf.seed_);
  });
  out.invariants.push_back(empty_invariants(1, nf.basis_id_, *nf.seed_, n));
  for (std::size_t i = 0; i < n; ++i) {
    const double nn = block_norm(seeds[i]);
    out.norms_full(static_cast<Eigen::Index>(i), 0) = nn;
    out.norms_kept(static_cast<Eigen::Index>(i), 0) = nn;
    out.invariants[0].values.row(static_cast<Eigen::Index>(i)) =
        invariants(seeds[i]).transpose();
  }
  std::vector<EquivariantBlock> prev = seeds;
  auto prev_layout = nf.seed_;
  for (int nu = 2; nu <= settings.nu_max; ++nu) {
    const int lam = nu == settings.nu_max ? 0 : nf.lambda_mid_;
    auto plan = std::make_shared<CouplingPlan>(nf.seed_, prev_layout, *nf.cg_, lam);
    std::vector<EquivariantBlock> next(n);
    parallel_for(n, workers, [&](std::size_t i) {
      next[i] = plan->apply(seeds[i], prev[i]);
    });
    const auto col = static_cast<Eigen::Index>(nu - 1);
    for (std::size_t i = 0; i < n; ++i) {
      out.norms_full(static_cast<Eigen::Index>(i), col) = block_norm(next[i]);
    }
    bool exceeds = false;
    for (const auto& g : plan->layout()->groups) {
      exceeds = exceeds || static_cast<int>(g.labels.size()) > settings.n_keep;
    }
    if (exceeds) {
      auto res = variance_truncation(next, settings.n_keep);
      if (warnings) {
        for (auto& w : res.warnings) warnings->push_back("order " + std::to_string(nu) + ": " + w);
      }
      nf.discarded_.push_back(res.transform.discarded_fraction);
      nf.truncations_.push_back(std::move(res.transform));
      next = std::move(res.blocks);
    } else {
      nf.discarded_.push_back(0.0);
      nf.truncations_.push_back(std::nullopt);
    }
    prev_layout = next.front().layout;
    out.invariants.push_back(empty_invariants(nu, nf.basis_id_, *prev_layout, n));
    for (std::size_t i = 0; i < n; ++i) {
      out.norms_kept(static_cast<Eigen::Index>(i), col) = block_norm(next[i]);
      out.invariants.back().values.row(static_cast<Eigen::Index>(i)) =
          invariants(next[i]).transpose();
    }
    nf.plans_.push_back(std::move(plan));
    prev = std::move(next);
  }
  if (train_output) *train_output = std::move(out);
  return nf;
}

NiceOutput NiceFeaturizer::transform(const std::vector<DensityCoeffs>& coeffs,
                                     int workers) const {
  if (!seed_) throw ValidationError("correlations", "featurizer is not fitted");
  if (channel_counts(coeffs) != channels_per_l_) {
    throw ValidationError("correlations",
                          "coefficients do not match the fitted featurizer");
  }
  const std::size_t n = coeffs.size();
  const int orders = settings_.nu_max;
  NiceOutput out;
  out.norms_full.resize(static_cast<Eigen::Index>(n), orders);
  out.norms_kept.resize(static_cast<Eigen::Index>(n), orders);
  std::vector<std::shared_ptr<const BlockLayout>> layouts{seed_};
  for (std::size_t k = 0; k < plans_.size(); ++k) {
    layouts.push_back(truncations_[k] ? truncations_[k]->target
                                      : plans_[k]->layout());
  }
  for (int nu = 1; nu <= orders; ++nu) {
    out.invariants.push_back(empty_invariants(
        nu, basis_id_, *layouts[static_cast<std::size_t>(nu - 1)], n));
  }
  parallel_for(n, workers, [&](std::size_t i) {
    const auto row = static_cast<Eigen::Index>(i);
    const auto seed = seed_block(coeffs[i], seed_);
    const double n1 = block_norm(seed);
    out.norms_full(row, 0) = n1;
    out.norms_kept(row, 0) = n1;
    out.invariants[0].values.row(row) = invariants(seed).transpose();
    EquivariantBlock prev = seed;
    for (std::size_t k = 0; k < plans_.size(); ++k) {
      auto next = plans_[k]->apply(seed, prev);
      const auto col = static_cast<Eigen::Index>(k + 1);
      out.norms_full(row, col) = block_norm(next);
      if (truncations_[k]) next = truncations_[k]->apply(next);
      out.norms_kept(row, col) = block_norm(next);
      out.invariants[k + 1].values.row(row) = invariants(next).transpose();
      prev = std::move(next);
    }
  });
  return out;
}

Blob NiceFeaturizer::to_blob() const {
  Blob b;
  json orders = json::array();
  for (std::size_t k = 0; k < truncations_.size(); ++k) {
    json o;
    o["order"] = static_cast<int>(k) + 2;
    o["discarded_fraction"] = discarded_[k + 1];
    o["truncated"] = truncations_[k].has_value();
    json groups = json::array();
    if (truncations_[k]) {
      const auto& tr = *truncations_[k];
      for (std::size_t t = 0; t < tr.U.size(); ++t) {
        groups.push_back({{"source_group", tr.source_group[t]},
                          {"rows", tr.U[t].rows()},
                          {"cols", tr.U[t].cols()}});
        for (Eigen::Index i = 0; i < tr.U[t].rows(); ++i)
          for (Eigen::Index j = 0; j < tr.U[t].cols(); ++j)
            b.payload.push_back(tr.U[t](i, j));
      }
    }
    o["groups"] = groups;
    orders.push_back(o);
  }
  b.header = {{"kind", "nice"},
              {"settings", to_json(settings_)},
              {"basis_id", basis_id_},
              {"channels_per_l", channels_per_l_},
              {"lambda_mid", lambda_mid_},
              {"orders", orders}};
  return b;
}

NiceFeaturizer NiceFeaturizer::from_blob(const Blob& blob) {
  NiceFeaturizer nf;
  const auto& h = blob.header;
  std::size_t pos = 0;
  try {
    if (h.at("kind") != "nice") {
      throw ValidationError("correlations", "blob is not a NICE featurizer");
    }
    nf.settings_ = nice_settings_from_json(h.at("settings"));
    nf.basis_id_ = h.at("basis_id").get<std::string>();
    nf.channels_per_l_ = h.at("channels_per_l").get<std::vector<int>>();
    nf.lambda_mid_ = h.at("lambda_mid").get<int>();
    nf.discarded_.assign(1, 0.0);
    for (const auto& o : h.at("orders")) {
      nf.discarded_.push_back(o.at("discarded_fraction").get<double>());
      if (!o.at("truncated").get<bool>()) {
        nf.truncations_.push_back(std::nullopt);
        continue;
      }
      BlockTruncation tr;
      for (const auto& g : o.at("groups")) {
        const auto rows = g.at("rows").get<Eigen::Index>();
        const auto cols = g.at("cols").get<Eigen::Index>();
        if (pos + static_cast<std::size_t>(rows * cols) > blob.payload.size()) {
          throw ValidationError("correlations", "NICE payload too short");
        }
        Eigen::MatrixXd U(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
          for (Eigen::Index j = 0; j < cols; ++j) U(i, j) = blob.payload[pos++];
        tr.source_group.push_back(g.at("source_group").get<int>());
        tr.U.push_back(std::move(U));
      }
      nf.truncations_.push_back(std::move(tr));
    }
  } catch (const json::exception& e) {
    throw ValidationError("correlations", std::string("bad NICE header: ") + e.what());
  }
  if (pos != blob.payload.size()) {
    throw ValidationError("correlations", "NICE payload size mismatch");
  }
  if (static_cast<int>(nf.truncations_.size()) != nf.settings_.nu_max - 1) {
    throw ValidationError("correlations", "NICE order count mismatch");
  }
  nf.build_plans();
  return nf;
}

}  // namespace optrad
