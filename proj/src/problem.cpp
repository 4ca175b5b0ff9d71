#include "mhe/problem.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <sstream>

namespace mhe {

BlockId Values::add(const Manifold& m, const Vec& value, const std::string& name,
                    bool active) {
  if (!m.is_valid(value)) {
    throw ContractViolation("Values::add: value violates manifold constraint for '" +
                            name + "'");
  }
  const BlockId id = next_id_++;
  blocks_[id] = ParameterBlock{m, value, active, name};
  return id;
}

ParameterBlock& Values::block(BlockId id) {
  auto it = blocks_.find(id);
  if (it == blocks_.end()) throw ConfigError("unknown block id " + std::to_string(id));
  return it->second;
}

const ParameterBlock& Values::block(BlockId id) const {
  auto it = blocks_.find(id);
  if (it == blocks_.end()) throw ConfigError("unknown block id " + std::to_string(id));
  return it->second;
}

void Values::remove(BlockId id) { blocks_.erase(id); }

bool Values::contains(BlockId id) const { return blocks_.count(id) > 0; }

Propagation propagate_chain(const ProcessModel& model, const Values& values,
                            const std::vector<BlockId>& state_blocks,
                            const ProcessChain& chain, bool with_covariance,
                            bool with_jacobians) {
  const int n = model.tangent_dim();
  const auto statics = model.static_blocks();

  Propagation prop;
  prop.values.reserve(state_blocks.size());
  for (BlockId id : state_blocks) prop.values.push_back(values.block(id).value);
  prop.stamp = chain.start_stamp;
  if (with_jacobians || with_covariance) prop.transition = Mat::Identity(n, n);
  if (with_covariance) prop.covariance = Mat::Zero(n, n);
  if (with_jacobians) {
    for (size_t s = 0; s < statics.size(); ++s) {
      prop.dstatics.push_back(
          Mat::Zero(n, values.block(statics[s]).manifold.tangent_dim()));
    }
  }

  const bool need_f = with_jacobians || with_covariance;
  auto advance = [&](const Vec& u, double dt) {
    std::vector<Vec> next;
    Mat F, Q;
    std::vector<Mat> dstat;
    model.step(prop.values, u, dt, values, &next, need_f ? &F : nullptr,
               with_covariance ? &Q : nullptr, with_jacobians ? &dstat : nullptr);
    prop.values = std::move(next);
    if (with_covariance)
      prop.covariance = F * prop.covariance * F.transpose() + Q;
    if (need_f) prop.transition = F * prop.transition;
    if (with_jacobians) {
      for (size_t s = 0; s < statics.size(); ++s)
        prop.dstatics[s] = F * prop.dstatics[s] + dstat[s];
    }
  };

  for (const ProcessMeasurement& m : chain.measurements) {
    const double dt = m.stamp - prop.stamp;
    if (dt <= 0.0) continue;
    advance(m.payload, dt);
    prop.stamp = m.stamp;
  }
  // Hold the last input over any remaining interval up to the chain end.
  if (!chain.measurements.empty() && chain.end_stamp - prop.stamp > 1e-12) {
    advance(chain.measurements.back().payload, chain.end_stamp - prop.stamp);
    prop.stamp = chain.end_stamp;
  }
  return prop;
}

Mat compute_chain_weight(const ProcessModel& model, const Values& values,
                         const std::vector<BlockId>& state_blocks,
                         const ProcessChain& chain) {
  if (chain.measurements.empty()) {
    throw ConfigError("compute_chain_weight: empty process chain over [" +
                      std::to_string(chain.start_stamp) + ", " +
                      std::to_string(chain.end_stamp) + "]");
  }
  const Propagation prop =
      propagate_chain(model, values, state_blocks, chain, true, false);
  const Mat& P = prop.covariance;

  Eigen::LLT<Mat> llt(P);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Mat> es(P);
    std::ostringstream msg;
    msg << "compute_chain_weight: propagated covariance singular; "
           "unobservable direction indices:";
    const double thresh = 1e-12 * std::max(es.eigenvalues().maxCoeff(), 1e-300);
    for (int i = 0; i < P.rows(); ++i) {
      if (es.eigenvalues()(i) < thresh) {
        int idx = 0;
        es.eigenvectors().col(i).cwiseAbs().maxCoeff(&idx);
        msg << " " << idx;
      }
    }
    throw NumericalError(msg.str());
  }
  const Mat info = llt.solve(Mat::Identity(P.rows(), P.cols()));
  Eigen::LLT<Mat> llt_info((info + info.transpose()) / 2.0);
  if (llt_info.info() != Eigen::Success) {
    throw NumericalError("compute_chain_weight: inverse covariance not positive definite");
  }
  return Mat(llt_info.matrixL()).transpose();
}

UpdateResidual::UpdateResidual(const UpdateModel* model, std::vector<BlockId> blocks,
                               UpdateMeasurement meas, std::string label)
    : model_(model), blocks_(std::move(blocks)), meas_(std::move(meas)),
      label_(std::move(label)) {}

Vec UpdateResidual::evaluate(const Values& values, std::vector<Mat>* jacobians) const {
  Vec f = model_->innovation(values, blocks_, meas_.payload, jacobians);
  if (jacobians) {
    for (Mat& J : *jacobians) J = meas_.weight_sqrt * J;
  }
  return meas_.weight_sqrt * f;
}

ProcessResidual::ProcessResidual(const ProcessModel* model,
                                 std::vector<BlockId> prev_blocks,
                                 std::vector<BlockId> next_blocks,
                                 const ProcessChain* chain, std::string label)
    : model_(model), prev_blocks_(std::move(prev_blocks)),
      next_blocks_(std::move(next_blocks)), chain_(chain), label_(std::move(label)) {
  blocks_ = prev_blocks_;
  blocks_.insert(blocks_.end(), next_blocks_.begin(), next_blocks_.end());
  const auto statics = model_->static_blocks();
  blocks_.insert(blocks_.end(), statics.begin(), statics.end());
}

Vec ProcessResidual::evaluate(const Values& values, std::vector<Mat>* jacobians) const {
  if (chain_->weight_sqrt.size() == 0) {
    throw ConfigError("process residual '" + label_ + "': chain weight not computed");
  }
  const Propagation prop = propagate_chain(*model_, values, prev_blocks_, *chain_,
                                           false, jacobians != nullptr);
  const int n = model_->tangent_dim();
  Vec f(n);
  int row = 0;
  std::vector<int> offsets(next_blocks_.size());
  for (size_t i = 0; i < next_blocks_.size(); ++i) {
    const ParameterBlock& nb = values.block(next_blocks_[i]);
    offsets[i] = row;
    f.segment(row, nb.manifold.tangent_dim()) =
        nb.manifold.boxminus(nb.value, prop.values[i]);
    row += nb.manifold.tangent_dim();
  }

  const Mat& W = chain_->weight_sqrt;
  if (jacobians) {
    jacobians->clear();
    // d f / d prev = -F, split per prev block.
    int col = 0;
    for (size_t i = 0; i < prev_blocks_.size(); ++i) {
      const int td = values.block(prev_blocks_[i]).manifold.tangent_dim();
      jacobians->push_back(-W * prop.transition.middleCols(col, td));
      col += td;
    }
    // d f / d next = +I per block (first order for non-Euclidean blocks).
    for (size_t i = 0; i < next_blocks_.size(); ++i) {
      const int td = values.block(next_blocks_[i]).manifold.tangent_dim();
      Mat J = Mat::Zero(n, td);
      J.block(offsets[i], 0, td, td).setIdentity();
      jacobians->push_back(W * J);
    }
    for (const Mat& ds : prop.dstatics) jacobians->push_back(-W * ds);
  }
  return W * f;
}

double total_cost(const std::vector<const Residual*>& residuals, const Values& values) {
  double cost = 0.0;
  for (const Residual* r : residuals) {
    const Vec e = r->evaluate(values, nullptr);
    cost += e.squaredNorm();
  }
  return cost;
}

double check_jacobians(const Residual& residual, Values& values, double step) {
  std::vector<Mat> analytic;
  residual.evaluate(values, &analytic);

  double worst = 0.0;
  const auto& ids = residual.blocks();
  for (size_t i = 0; i < ids.size(); ++i) {
    ParameterBlock& blk = values.block(ids[i]);
    const Vec saved = blk.value;
    const int td = blk.manifold.tangent_dim();
    Mat fd(residual.dim(), td);
    for (int j = 0; j < td; ++j) {
      Vec delta = Vec::Zero(td);
      delta(j) = step;
      blk.value = blk.manifold.boxplus(saved, delta);
      const Vec ep = residual.evaluate(values, nullptr);
      delta(j) = -step;
      blk.value = blk.manifold.boxplus(saved, delta);
      const Vec em = residual.evaluate(values, nullptr);
      blk.value = saved;
      fd.col(j) = (ep - em) / (2.0 * step);
    }
    const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
    worst = std::max(worst, (analytic[i] - fd).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

}  // namespace mhe
