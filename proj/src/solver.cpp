#include "mhe/solver.hpp"

#include <Eigen/SparseCholesky>
#include <chrono>
#include <cmath>
#include <thread>

namespace mhe {

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string block_name_at(const Ordering& ordering, const Values& values, int column) {
  for (size_t i = 0; i < ordering.blocks.size(); ++i) {
    const int td = values.block(ordering.blocks[i]).manifold.tangent_dim();
    if (column >= ordering.offsets[i] && column < ordering.offsets[i] + td) {
      return values.block(ordering.blocks[i]).name;
    }
  }
  return "column " + std::to_string(column);
}

}  // namespace

Ordering Ordering::build(const Values& values, const std::vector<BlockId>& active_blocks) {
  Ordering o;
  for (BlockId id : active_blocks) {
    if (!values.block(id).active) continue;
    o.position[id] = static_cast<int>(o.blocks.size());
    o.blocks.push_back(id);
    o.names.push_back(values.block(id).name);
    o.offsets.push_back(o.dim);
    o.dim += values.block(id).manifold.tangent_dim();
  }
  return o;
}

void SolverOptions::validate() const {
  if (max_iterations < 1) throw ConfigError("SolverOptions: max_iterations must be >= 1");
  if (cost_decrease_tol <= 0 || gradient_tol <= 0)
    throw ConfigError("SolverOptions: tolerances must be > 0");
  if (lambda_up <= 1.0) throw ConfigError("SolverOptions: lambda_up must be > 1");
  if (lambda_down <= 0.0 || lambda_down >= 1.0)
    throw ConfigError("SolverOptions: lambda_down must be in (0, 1)");
  if (loss == LossKind::Huber && huber_threshold <= 0.0)
    throw ConfigError("SolverOptions: huber_threshold must be > 0");
  if (worker_count < 1) throw ConfigError("SolverOptions: worker_count must be >= 1");
}

std::vector<LinearizedResidual> linearize(const std::vector<const Residual*>& residuals,
                                          const Values& values, int worker_count) {
  std::vector<LinearizedResidual> out(residuals.size());
  const int n = static_cast<int>(residuals.size());
  const int workers = std::max(1, std::min(worker_count, n));

  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      out[i].e = residuals[i]->evaluate(values, &out[i].jacobians);
    }
  };

  if (workers == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> threads;
    const int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const int begin = w * chunk;
      const int end = std::min(n, begin + chunk);
      if (begin < end) threads.emplace_back(work, begin, end);
    }
    for (auto& t : threads) t.join();
  }

  for (int i = 0; i < n; ++i) {
    bool finite = out[i].e.allFinite();
    for (const Mat& J : out[i].jacobians) finite = finite && J.allFinite();
    if (!finite) {
      throw NumericalError("non-finite entry in residual '" + residuals[i]->label() + "'");
    }
  }
  return out;
}

void apply_robust_loss(LinearizedResidual& lr, LossKind loss, double threshold) {
  if (loss == LossKind::None) return;
  const double s = lr.e.norm();
  const double k = threshold;
  if (s <= k || s == 0.0) return;
  // Squared norm of the rescaled block equals the Huber cost 2 k s - k^2.
  const double scale = std::sqrt(2.0 * k * s - k * k) / s;
  lr.e *= scale;
  for (Mat& J : lr.jacobians) J *= scale;
}

SparseNormalEquations assemble_normal_equations(
    const std::vector<const Residual*>& residuals,
    const std::vector<LinearizedResidual>& linearized, const Values& values,
    const Ordering& ordering) {
  SparseNormalEquations neq;
  neq.ordering = ordering;
  neq.b = Vec::Zero(ordering.dim);

  std::vector<Eigen::Triplet<double>> triplets;
  for (size_t r = 0; r < residuals.size(); ++r) {
    const auto& ids = residuals[r]->blocks();
    const auto& lr = linearized[r];
    // Active blocks of this residual, with their ordering positions.
    std::vector<int> pos;
    std::vector<const Mat*> jac;
    for (size_t i = 0; i < ids.size(); ++i) {
      auto it = ordering.position.find(ids[i]);
      if (it == ordering.position.end()) continue;  // inactive or outside problem
      pos.push_back(it->second);
      jac.push_back(&lr.jacobians[i]);
    }
    for (size_t i = 0; i < pos.size(); ++i) {
      neq.b.segment(ordering.offsets[pos[i]], jac[i]->cols()) -=
          jac[i]->transpose() * lr.e;
      for (size_t j = 0; j < pos.size(); ++j) {
        const Mat M = jac[i]->transpose() * (*jac[j]);
        const int r0 = ordering.offsets[pos[i]];
        const int c0 = ordering.offsets[pos[j]];
        for (int a = 0; a < M.rows(); ++a)
          for (int c = 0; c < M.cols(); ++c)
            triplets.emplace_back(r0 + a, c0 + c, M(a, c));
        neq.block_pattern.insert({std::min(pos[i], pos[j]), std::max(pos[i], pos[j])});
      }
    }
  }

  neq.H.resize(ordering.dim, ordering.dim);
  neq.H.setFromTriplets(triplets.begin(), triplets.end());
  return neq;
}

Vec solve_damped(const SparseNormalEquations& neq, double lambda) {
  if (neq.ordering.dim == 0) return Vec();

  Eigen::SparseMatrix<double> Hd = neq.H;
  if (lambda > 0.0) {
    const Vec diag = neq.H.diagonal();
    Eigen::SparseMatrix<double> D(neq.ordering.dim, neq.ordering.dim);
    std::vector<Eigen::Triplet<double>> t;
    for (int i = 0; i < diag.size(); ++i) t.emplace_back(i, i, lambda * diag(i));
    D.setFromTriplets(t.begin(), t.end());
    Hd = Hd + D;
  }

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(Hd);
  bool ok = ldlt.info() == Eigen::Success;
  int bad_permuted = -1;
  int bad_column = -1;
  if (!ok) {
    // A factorization failure is most often an unconstrained (zero-diagonal)
    // parameter; report the first such column directly.
    const Vec diag = Hd.diagonal();
    for (int i = 0; i < diag.size(); ++i) {
      if (!(diag(i) > 0.0)) {
        bad_column = i;
        break;
      }
    }
  }
  if (ok) {
    const Vec d = ldlt.vectorD();
    for (int i = 0; i < d.size(); ++i) {
      if (!(d(i) > 0.0)) {
        ok = false;
        bad_permuted = i;
        break;
      }
    }
  }
  if (!ok) {
    int column = bad_column;
    if (bad_permuted >= 0) {
      const auto& perm = ldlt.permutationP().indices();
      for (int i = 0; i < perm.size(); ++i) {
        if (perm(i) == bad_permuted) {
          column = i;
          break;
        }
      }
    }
    std::string where;
    if (column >= 0) {
      where = " at column " + std::to_string(column);
      for (size_t i = 0; i < neq.ordering.offsets.size(); ++i) {
        const int begin = neq.ordering.offsets[i];
        const int end = i + 1 < neq.ordering.offsets.size()
                            ? neq.ordering.offsets[i + 1]
                            : neq.ordering.dim;
        if (column >= begin && column < end && i < neq.ordering.names.size()) {
          where += " (block '" + neq.ordering.names[i] + "')";
          break;
        }
      }
    }
    throw NumericalError("solve_damped: non-positive pivot" + where);
  }
  return ldlt.solve(neq.b);
}

nlohmann::json SolveReport::to_json() const {
  nlohmann::json j;
  j["status"] = status;
  j["initial_cost"] = initial_cost;
  j["final_cost"] = final_cost;
  j["accepted_steps"] = accepted_steps;
  j["iterations"] = nlohmann::json::array();
  for (const auto& it : iterations) {
    j["iterations"].push_back({{"iteration", it.iteration},
                               {"cost", it.cost},
                               {"lambda", it.lambda},
                               {"step_norm", it.step_norm},
                               {"accepted", it.accepted},
                               {"linearize_seconds", it.linearize_seconds},
                               {"solve_seconds", it.solve_seconds}});
  }
  return j;
}

namespace {

double robust_cost(std::vector<LinearizedResidual>& lin, const SolverOptions& opt) {
  double cost = 0.0;
  for (auto& lr : lin) {
    apply_robust_loss(lr, opt.loss, opt.huber_threshold);
    cost += lr.e.squaredNorm();
  }
  return cost;
}

void apply_increment(Values& values, const Ordering& ordering, const Vec& dx) {
  for (size_t i = 0; i < ordering.blocks.size(); ++i) {
    ParameterBlock& blk = values.block(ordering.blocks[i]);
    blk.value = blk.manifold.boxplus(
        blk.value, dx.segment(ordering.offsets[i], blk.manifold.tangent_dim()));
  }
}

}  // namespace

SolveReport optimize(const std::vector<const Residual*>& residuals, Values& values,
                     const Ordering& ordering, const SolverOptions& options) {
  options.validate();
  SolveReport report;

  if (residuals.empty() || ordering.dim == 0) {
    report.status = "empty";
    return report;
  }

  auto t0 = std::chrono::steady_clock::now();
  std::vector<LinearizedResidual> lin = linearize(residuals, values, options.worker_count);
  double cost = robust_cost(lin, options);
  double lin_time = seconds_since(t0);
  if (!std::isfinite(cost)) throw NumericalError("optimize: non-finite initial cost");

  report.initial_cost = cost;
  SparseNormalEquations neq =
      assemble_normal_equations(residuals, lin, values, ordering);

  double lambda = options.initial_lambda;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    IterationRecord rec;
    rec.iteration = iter;
    rec.lambda = lambda;
    rec.linearize_seconds = lin_time;
    lin_time = 0.0;

    if (neq.b.size() == 0 || neq.b.lpNorm<Eigen::Infinity>() < options.gradient_tol) {
      report.status = "converged_gradient";
      break;
    }

    t0 = std::chrono::steady_clock::now();
    const Vec dx = solve_damped(neq, lambda);
    rec.solve_seconds = seconds_since(t0);
    rec.step_norm = dx.norm();

    // Trial step on a copy of the active values.
    std::vector<Vec> saved;
    saved.reserve(ordering.blocks.size());
    for (BlockId id : ordering.blocks) saved.push_back(values.block(id).value);
    apply_increment(values, ordering, dx);

    t0 = std::chrono::steady_clock::now();
    std::vector<LinearizedResidual> trial_lin =
        linearize(residuals, values, options.worker_count);
    const double trial_cost = robust_cost(trial_lin, options);
    lin_time = seconds_since(t0);
    if (!std::isfinite(trial_cost))
      throw NumericalError("optimize: non-finite cost after step");

    if (trial_cost < cost) {
      rec.accepted = true;
      rec.cost = trial_cost;
      report.iterations.push_back(rec);
      report.accepted_steps++;
      const double rel = (cost - trial_cost) / std::max(cost, 1e-300);
      cost = trial_cost;
      lin = std::move(trial_lin);
      neq = assemble_normal_equations(residuals, lin, values, ordering);
      lambda *= options.lambda_down;
      if (rel < options.cost_decrease_tol) {
        report.status = "converged_cost";
        break;
      }
    } else {
      rec.accepted = false;
      rec.cost = cost;
      report.iterations.push_back(rec);
      for (size_t i = 0; i < ordering.blocks.size(); ++i)
        values.block(ordering.blocks[i]).value = saved[i];
      lambda *= options.lambda_up;
      if (lambda > 1e32) {
        report.status = "stalled";
        break;
      }
    }
  }

  if (report.status.empty()) report.status = "max_iterations";
  report.final_cost = cost;
  return report;
}

}  // namespace mhe
