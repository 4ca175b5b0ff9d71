#include "mhe/marginalization.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <set>
#include <sstream>

namespace mhe {

namespace {

constexpr double kRankTol = 1e-10;

nlohmann::json vec_to_json(const Vec& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vec vec_from_json(const nlohmann::json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v(i) = a[i].get<double>();
  return v;
}

nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i)));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Mat mat_from_json(const nlohmann::json& j) {
  Mat m(j["rows"].get<int>(), j["cols"].get<int>());
  for (int i = 0; i < m.rows(); ++i) m.row(i) = vec_from_json(j["data"][i]).transpose();
  return m;
}

nlohmann::json manifold_to_json(const Manifold& m) {
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      return {{"kind", "euclidean"}, {"dim", m.ambient_dim()}};
    case Manifold::Kind::UnitQuaternion:
      return {{"kind", "unit_quaternion"}};
    case Manifold::Kind::Angle:
      return {{"kind", "angle"}};
  }
  throw ConfigError("unknown manifold kind");
}

Manifold manifold_from_json(const nlohmann::json& j) {
  const std::string kind = j["kind"].get<std::string>();
  if (kind == "euclidean") return Manifold::Euclidean(j["dim"].get<int>());
  if (kind == "unit_quaternion") return Manifold::UnitQuaternion();
  if (kind == "angle") return Manifold::Angle();
  throw ConfigError("unknown manifold kind '" + kind + "'");
}

PriorConstraint build_prior_from(const Mat& h_star, const Vec& b_star,
                                 std::vector<BlockId> linked,
                                 std::vector<Vec> lin_points,
                                 std::vector<Manifold> manifolds) {
  const Mat h_sym = (h_star + h_star.transpose()) / 2.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(h_sym);
  const Vec evals = es.eigenvalues();
  const double max_eig = std::max(evals.size() > 0 ? evals.maxCoeff() : 0.0, 0.0);
  if (evals.size() > 0 && evals.minCoeff() < -1e-8 * std::max(max_eig, 1.0)) {
    throw NumericalError("build_prior: H* is significantly indefinite (min eigenvalue " +
                         std::to_string(evals.minCoeff()) + ")");
  }

  // Retained rank: eigenvalues above 1e-10 of the largest, descending order.
  std::vector<int> keep;
  for (int i = evals.size() - 1; i >= 0; --i) {
    if (evals(i) > kRankTol * std::max(max_eig, 1e-300)) keep.push_back(i);
  }

  PriorConstraint prior;
  prior.linked = std::move(linked);
  prior.linearization_point = std::move(lin_points);
  prior.manifolds = std::move(manifolds);
  const int n = static_cast<int>(h_sym.rows());
  const int r = static_cast<int>(keep.size());
  prior.sqrt_information = Mat::Zero(r, n);
  prior.offset = Vec::Zero(r);
  for (int row = 0; row < r; ++row) {
    const double lam = evals(keep[row]);
    const Vec v = es.eigenvectors().col(keep[row]);
    prior.sqrt_information.row(row) = std::sqrt(lam) * v.transpose();
    // offset = (J_p^T)^+ b* so that J_p^T offset reproduces b* on the
    // retained rank; with J_p^T = V S^{1/2} the pseudo-inverse is S^{-1/2} V^T.
    prior.offset(row) = v.dot(b_star) / std::sqrt(lam);
  }
  return prior;
}

/// Pseudo-inverse of a symmetric PSD matrix via eigendecomposition.
Mat psd_pinv(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es((a + a.transpose()) / 2.0);
  const Vec evals = es.eigenvalues();
  const double max_eig = std::max(evals.maxCoeff(), 0.0);
  Mat inv = Mat::Zero(a.rows(), a.cols());
  for (int i = 0; i < evals.size(); ++i) {
    if (evals(i) > kRankTol * std::max(max_eig, 1e-300)) {
      inv += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose() / evals(i);
    }
  }
  return inv;
}

}  // namespace

int PriorConstraint::tangent_dim() const {
  int n = 0;
  for (const Manifold& m : manifolds) n += m.tangent_dim();
  return n;
}

nlohmann::json PriorConstraint::to_json(const Values& values) const {
  nlohmann::json j;
  j["linked"] = nlohmann::json::array();
  for (size_t i = 0; i < linked.size(); ++i) {
    j["linked"].push_back({{"name", values.block(linked[i]).name},
                           {"manifold", manifold_to_json(manifolds[i])},
                           {"linearization_point", vec_to_json(linearization_point[i])}});
  }
  j["sqrt_information"] = mat_to_json(sqrt_information);
  j["offset"] = vec_to_json(offset);
  return j;
}

PriorConstraint PriorConstraint::from_json(
    const nlohmann::json& j, const std::map<std::string, BlockId>& by_name) {
  PriorConstraint prior;
  for (const auto& entry : j["linked"]) {
    const std::string name = entry["name"].get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ConfigError("prior references unknown parameter '" + name + "'");
    prior.linked.push_back(it->second);
    prior.manifolds.push_back(manifold_from_json(entry["manifold"]));
    prior.linearization_point.push_back(vec_from_json(entry["linearization_point"]));
  }
  prior.sqrt_information = mat_from_json(j["sqrt_information"]);
  prior.offset = vec_from_json(j["offset"]);
  return prior;
}

Subproblem build_subproblem(const std::vector<const Residual*>& residuals,
                            const Values& values,
                            const std::vector<BlockId>& params_m) {
  if (params_m.empty()) throw ConfigError("build_subproblem: params_m is empty");
  const std::set<BlockId> marg_set(params_m.begin(), params_m.end());

  std::vector<const Residual*> touching;
  std::vector<BlockId> linked;
  std::set<BlockId> linked_set;
  for (const Residual* r : residuals) {
    bool touches = false;
    for (BlockId id : r->blocks()) {
      if (marg_set.count(id)) {
        touches = true;
        break;
      }
    }
    if (!touches) continue;
    touching.push_back(r);
    for (BlockId id : r->blocks()) {
      if (marg_set.count(id) || !values.block(id).active) continue;
      if (linked_set.insert(id).second) linked.push_back(id);
    }
  }

  Subproblem sub;
  sub.marginalized = params_m;
  sub.linked = linked;

  // Ordering with the marginalized parameters first.
  std::vector<BlockId> ordered = params_m;
  ordered.insert(ordered.end(), linked.begin(), linked.end());
  std::unordered_map<BlockId, int> offset;
  int dim = 0;
  for (BlockId id : ordered) {
    offset[id] = dim;
    dim += values.block(id).manifold.tangent_dim();
    if (marg_set.count(id)) sub.marg_dim = dim;
  }
  sub.linked_dim = dim - sub.marg_dim;

  sub.H = Mat::Zero(dim, dim);
  sub.b = Vec::Zero(dim);
  for (const Residual* r : touching) {
    std::vector<Mat> jac;
    const Vec e = r->evaluate(values, &jac);
    const auto& ids = r->blocks();
    for (size_t i = 0; i < ids.size(); ++i) {
      auto oi = offset.find(ids[i]);
      if (oi == offset.end()) continue;  // inactive
      sub.b.segment(oi->second, jac[i].cols()) -= jac[i].transpose() * e;
      for (size_t k = 0; k < ids.size(); ++k) {
        auto ok = offset.find(ids[k]);
        if (ok == offset.end()) continue;
        sub.H.block(oi->second, ok->second, jac[i].cols(), jac[k].cols()) +=
            jac[i].transpose() * jac[k];
      }
    }
  }
  return sub;
}

void schur_marginalize(const Subproblem& sub, Mat* h_star, Vec* b_star) {
  const int m = sub.marg_dim;
  const int l = sub.linked_dim;
  const Mat h_mm = sub.H.topLeftCorner(m, m);
  const Mat h_ml = sub.H.topRightCorner(m, l);
  const Mat h_ll = sub.H.bottomRightCorner(l, l);
  const Vec b_m = sub.b.head(m);
  const Vec b_l = sub.b.tail(l);

  Eigen::LLT<Mat> llt(h_mm);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Mat> es(h_mm);
    std::ostringstream msg;
    msg << "schur_marginalize: H_mm rank deficient; directions:";
    const double thresh = kRankTol * std::max(es.eigenvalues().maxCoeff(), 1e-300);
    for (int i = 0; i < m; ++i) {
      if (es.eigenvalues()(i) < thresh) {
        int idx = 0;
        es.eigenvectors().col(i).cwiseAbs().maxCoeff(&idx);
        msg << " " << idx;
      }
    }
    throw NumericalError(msg.str());
  }
  const Mat h_mm_inv_h_ml = llt.solve(h_ml);
  *h_star = h_ll - h_ml.transpose() * h_mm_inv_h_ml;
  *b_star = b_l - h_mm_inv_h_ml.transpose() * b_m;
}

PriorConstraint build_prior(const Mat& h_star, const Vec& b_star,
                            const std::vector<BlockId>& linked,
                            const Values& values) {
  std::vector<Vec> lin;
  std::vector<Manifold> manifolds;
  for (BlockId id : linked) {
    lin.push_back(values.block(id).value);
    manifolds.push_back(values.block(id).manifold);
  }
  return build_prior_from(h_star, b_star, linked, std::move(lin), std::move(manifolds));
}

Vec evaluate_prior(const PriorConstraint& prior, const Values& values,
                   std::vector<Mat>* jacobians) {
  Vec delta(prior.tangent_dim());
  int off = 0;
  std::vector<int> offsets(prior.linked.size());
  for (size_t i = 0; i < prior.linked.size(); ++i) {
    const Manifold& m = prior.manifolds[i];
    offsets[i] = off;
    delta.segment(off, m.tangent_dim()) =
        m.boxminus(prior.linearization_point[i], values.block(prior.linked[i]).value);
    off += m.tangent_dim();
  }
  if (jacobians) {
    jacobians->clear();
    // Tangent transport treated as identity (first-order prior).
    for (size_t i = 0; i < prior.linked.size(); ++i) {
      jacobians->push_back(
          -prior.sqrt_information.middleCols(offsets[i], prior.manifolds[i].tangent_dim()));
    }
  }
  return prior.sqrt_information * delta + prior.offset;
}

PriorConstraint factor_out(const PriorConstraint& prior,
                           const std::vector<BlockId>& params_r) {
  const std::set<BlockId> remove(params_r.begin(), params_r.end());
  for (BlockId id : params_r) {
    if (std::find(prior.linked.begin(), prior.linked.end(), id) == prior.linked.end())
      throw ConfigError("factor_out: parameter not linked by the prior");
  }

  std::vector<int> keep_idx, drop_idx;
  for (size_t i = 0; i < prior.linked.size(); ++i) {
    (remove.count(prior.linked[i]) ? drop_idx : keep_idx).push_back(static_cast<int>(i));
  }
  if (keep_idx.empty()) return PriorConstraint{};

  const Mat h_star = prior.sqrt_information.transpose() * prior.sqrt_information;
  const Vec b_star = prior.gradient_at_linearization();

  std::vector<int> offsets(prior.linked.size());
  int off = 0;
  for (size_t i = 0; i < prior.linked.size(); ++i) {
    offsets[i] = off;
    off += prior.manifolds[i].tangent_dim();
  }

  auto gather_cols = [&](const std::vector<int>& idx) {
    std::vector<int> cols;
    for (int i : idx) {
      for (int c = 0; c < prior.manifolds[i].tangent_dim(); ++c)
        cols.push_back(offsets[i] + c);
    }
    return cols;
  };
  const std::vector<int> rcols = gather_cols(drop_idx);
  const std::vector<int> kcols = gather_cols(keep_idx);

  auto sub_mat = [&](const std::vector<int>& rows, const std::vector<int>& cols) {
    Mat m(rows.size(), cols.size());
    for (size_t i = 0; i < rows.size(); ++i)
      for (size_t j = 0; j < cols.size(); ++j) m(i, j) = h_star(rows[i], cols[j]);
    return m;
  };
  const Mat h_rr = sub_mat(rcols, rcols);
  const Mat h_rk = sub_mat(rcols, kcols);
  const Mat h_kk = sub_mat(kcols, kcols);
  Vec b_r(rcols.size()), b_k(kcols.size());
  for (size_t i = 0; i < rcols.size(); ++i) b_r(i) = b_star(rcols[i]);
  for (size_t i = 0; i < kcols.size(); ++i) b_k(i) = b_star(kcols[i]);

  // Pseudo-inverse handles parameters the prior holds no information on.
  const Mat h_rr_pinv = psd_pinv(h_rr);
  const Mat h_new = h_kk - h_rk.transpose() * h_rr_pinv * h_rk;
  const Vec b_new = b_k - h_rk.transpose() * h_rr_pinv * b_r;

  std::vector<BlockId> linked;
  std::vector<Vec> lin;
  std::vector<Manifold> manifolds;
  for (int i : keep_idx) {
    linked.push_back(prior.linked[i]);
    lin.push_back(prior.linearization_point[i]);
    manifolds.push_back(prior.manifolds[i]);
  }
  return build_prior_from(h_new, b_new, std::move(linked), std::move(lin),
                          std::move(manifolds));
}

}  // namespace mhe
