#include "lss/lowrank.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

#include "lss/error.hpp"

namespace lss::lowrank {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapRM = Eigen::Map<const MatRM>;
using MapRM = Eigen::Map<MatRM>;

void require_shape(const Tensor& t, const Shape& shape, const char* what) {
  if (t.shape() != shape)
    throw InvalidArgument(std::string(what) + " has shape " + shape_string(t.shape()) + ", expected " +
                          shape_string(shape));
}

Tensor identity_stack(std::int64_t channels, std::int64_t n) {
  Tensor t(Shape{channels, n, n});
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < n; ++i) t[(c * n + i) * n + i] = 1.0;
  return t;
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

}  // namespace

void SyntheticDataset::validate() const {
  const auto& mt = meta;
  if (mt.rank < 1 || mt.rank > std::min(mt.height, mt.width))
    throw InvalidArgument("rank must lie in [1, min(H, W)]");
  if (static_cast<std::int64_t>(mappers.size()) != mt.mappers)
    throw InvalidArgument("mapper count does not match metadata");
  if (static_cast<std::int64_t>(basis.size()) != mt.images())
    throw InvalidArgument("basis block count must equal k*m");
  for (std::size_t i = 0; i < mappers.size(); ++i) {
    if (mappers[i].id != static_cast<int>(i)) throw InvalidArgument("mapper ids must be 0..k-1 in order");
    require_shape(mappers[i].u, {mt.channels, mt.height, mt.rank}, "mapper U");
    require_shape(mappers[i].vt, {mt.channels, mt.rank, mt.width}, "mapper Vt");
    if (!mappers[i].u.all_finite() || !mappers[i].vt.all_finite()) throw InvalidArgument("mapper has non-finite entries");
  }
  for (std::size_t j = 0; j < basis.size(); ++j) {
    const auto expected = static_cast<int>(static_cast<std::int64_t>(j) / mt.blocks_per_mapper);
    if (basis[j].mapper_id != expected) throw InvalidArgument("basis block order must be mapper-major");
    require_shape(basis[j].sigma, {mt.channels, mt.rank, mt.rank}, "basis sigma");
    if (!basis[j].sigma.all_finite()) throw InvalidArgument("basis block has non-finite entries");
  }
}

std::int64_t SyntheticDataset::factor_param_count() const {
  const auto& mt = meta;
  return mt.channels * mt.mappers * (mt.height * mt.rank + mt.rank * mt.width) +
         mt.channels * mt.images() * mt.rank * mt.rank;
}

std::int64_t plan_param_count(std::int64_t channels, std::int64_t height, std::int64_t width,
                              std::int64_t num_classes, std::int64_t rank, std::int64_t k, std::int64_t m) {
  return channels * k * (height * rank + rank * width) + channels * k * m * rank * rank + k * m * num_classes;
}

StoragePlan plan_budget(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t num_classes,
                        std::int64_t ipc, std::int64_t rank, std::optional<std::int64_t> k,
                        std::optional<std::int64_t> m) {
  if (channels < 1 || height < 1 || width < 1 || num_classes < 1 || ipc < 1)
    throw InvalidArgument("plan_budget: dimensions, class count and ipc must be positive");
  if (rank < 1 || rank > std::min(height, width)) throw InvalidArgument("plan_budget: rank must lie in [1, min(H, W)]");
  if ((k && *k < 1) || (m && *m < 1)) throw InvalidArgument("plan_budget: k and m must be positive");

  StoragePlan plan;
  plan.channels = channels;
  plan.height = height;
  plan.width = width;
  plan.num_classes = num_classes;
  plan.ipc = ipc;
  plan.rank = rank;
  plan.budget = num_classes * ipc * channels * height * width;

  const std::int64_t k_lo = k ? *k : 1, k_hi = k ? *k : kMaxMappers;
  const std::int64_t m_lo = m ? *m : 1, m_hi = m ? *m : kMaxBlocksPerMapper;
  bool found = false;
  for (std::int64_t kk = k_lo; kk <= k_hi; ++kk) {
    for (std::int64_t mm = m_hi; mm >= m_lo; --mm) {
      const auto count = plan_param_count(channels, height, width, num_classes, rank, kk, mm);
      if (count > plan.budget) continue;
      const auto images = kk * mm;
      const bool better = !found || images > plan.images ||
                          (images == plan.images && count > plan.param_count);
      if (better) {
        found = true;
        plan.mappers = kk;
        plan.blocks_per_mapper = mm;
        plan.images = images;
        plan.param_count = count;
      }
      break;  // largest feasible m for this k dominates smaller ones
    }
  }
  if (!found) {
    if (k && m)
      throw InfeasibleBudget("plan (r=" + std::to_string(rank) + ", k=" + std::to_string(*k) + ", m=" +
                             std::to_string(*m) + ") needs " +
                             std::to_string(plan_param_count(channels, height, width, num_classes, rank, *k, *m)) +
                             " floats, budget is " + std::to_string(plan.budget));
    throw InfeasibleBudget("no (k, m) with at least one image fits a budget of " + std::to_string(plan.budget) +
                           " floats at rank " + std::to_string(rank));
  }
  plan.utilization = static_cast<double>(plan.param_count) / static_cast<double>(plan.budget);
  return plan;
}

StoragePlan plan_pixels(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t num_classes,
                        std::int64_t ipc) {
  if (height != width) throw InvalidArgument("pixel parameterization requires square images");
  if (channels < 1 || height < 1 || num_classes < 1 || ipc < 1)
    throw InvalidArgument("plan_pixels: dimensions, class count and ipc must be positive");
  StoragePlan plan;
  plan.channels = channels;
  plan.height = height;
  plan.width = width;
  plan.num_classes = num_classes;
  plan.ipc = ipc;
  plan.rank = height;
  plan.mappers = 1;
  plan.blocks_per_mapper = num_classes * ipc;
  plan.images = plan.blocks_per_mapper;
  plan.budget = num_classes * ipc * channels * height * width;
  plan.param_count = plan.budget;
  plan.utilization = 1.0;
  plan.lowrank = false;
  return plan;
}

Tensor synthesize(const MapperSet& mapper, const BasisBlock& block) {
  if (block.mapper_id != mapper.id) throw InvalidArgument("synthesize: block belongs to a different mapper");
  if (mapper.u.rank() != 3 || mapper.vt.rank() != 3 || block.sigma.rank() != 3)
    throw InvalidArgument("synthesize: factors must be rank-3 [C, ., .] tensors");
  const auto c = mapper.u.dim(0), h = mapper.u.dim(1), r = mapper.u.dim(2), w = mapper.vt.dim(2);
  if (mapper.vt.dim(0) != c || mapper.vt.dim(1) != r || block.sigma.shape() != Shape{c, r, r})
    throw InvalidArgument("synthesize: inconsistent factor shapes");
  Tensor out(Shape{c, h, w});
  MatRM tmp(h, r);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    CMapRM U(mapper.u.ptr() + ch * h * r, h, r);
    CMapRM S(block.sigma.ptr() + ch * r * r, r, r);
    CMapRM V(mapper.vt.ptr() + ch * r * w, r, w);
    MapRM O(out.ptr() + ch * h * w, h, w);
    tmp.noalias() = U * S;
    O.noalias() = tmp * V;
  }
  return out;
}

std::vector<Tensor> synthesize_all(const SyntheticDataset& dataset) {
  dataset.validate();
  std::vector<Tensor> out;
  out.reserve(dataset.basis.size());
  for (const auto& block : dataset.basis)
    out.push_back(synthesize(dataset.mappers[static_cast<std::size_t>(block.mapper_id)], block));
  return out;
}

ad::Var synthesize_stacked(const ad::Var& u, const ad::Var& vt, const ad::Var& sigma, const DatasetMeta& meta) {
  const auto k = meta.mappers, m = meta.blocks_per_mapper, c = meta.channels, h = meta.height, w = meta.width,
             r = meta.rank;
  if (u.shape() != Shape{k, c, h, r} || vt.shape() != Shape{k, c, r, w} || sigma.shape() != Shape{k * m, c, r, r})
    throw InvalidArgument("synthesize_stacked: factor shapes do not match metadata");
  std::vector<std::int64_t> owner(static_cast<std::size_t>(k * m));
  for (std::int64_t j = 0; j < k * m; ++j) owner[static_cast<std::size_t>(j)] = j / m;
  const auto n = k * m;
  ad::Var ur = ad::reshape(ad::gather_rows(u, owner), {n * c, h, r});
  ad::Var vr = ad::reshape(ad::gather_rows(vt, owner), {n * c, r, w});
  ad::Var s = ad::reshape(sigma, {n * c, r, r});
  return ad::reshape(ad::matmul(ad::matmul(ur, s), vr), {n, c, h, w});
}

StackedFactors stack(const SyntheticDataset& dataset) {
  const auto& mt = dataset.meta;
  StackedFactors f{Tensor(Shape{mt.mappers, mt.channels, mt.height, mt.rank}),
                   Tensor(Shape{mt.mappers, mt.channels, mt.rank, mt.width}),
                   Tensor(Shape{mt.images(), mt.channels, mt.rank, mt.rank})};
  const auto un = mt.channels * mt.height * mt.rank, vn = mt.channels * mt.rank * mt.width,
             sn = mt.channels * mt.rank * mt.rank;
  for (std::size_t i = 0; i < dataset.mappers.size(); ++i) {
    std::copy_n(dataset.mappers[i].u.ptr(), un, f.u.ptr() + static_cast<std::int64_t>(i) * un);
    std::copy_n(dataset.mappers[i].vt.ptr(), vn, f.vt.ptr() + static_cast<std::int64_t>(i) * vn);
  }
  for (std::size_t j = 0; j < dataset.basis.size(); ++j)
    std::copy_n(dataset.basis[j].sigma.ptr(), sn, f.sigma.ptr() + static_cast<std::int64_t>(j) * sn);
  return f;
}

void unstack(const StackedFactors& f, SyntheticDataset& dataset) {
  const auto& mt = dataset.meta;
  const auto un = mt.channels * mt.height * mt.rank, vn = mt.channels * mt.rank * mt.width,
             sn = mt.channels * mt.rank * mt.rank;
  if (f.u.numel() != un * mt.mappers || f.vt.numel() != vn * mt.mappers || f.sigma.numel() != sn * mt.images())
    throw InvalidArgument("unstack: factor sizes do not match dataset");
  for (std::size_t i = 0; i < dataset.mappers.size(); ++i) {
    std::copy_n(f.u.ptr() + static_cast<std::int64_t>(i) * un, un, dataset.mappers[i].u.ptr());
    std::copy_n(f.vt.ptr() + static_cast<std::int64_t>(i) * vn, vn, dataset.mappers[i].vt.ptr());
  }
  for (std::size_t j = 0; j < dataset.basis.size(); ++j)
    std::copy_n(f.sigma.ptr() + static_cast<std::int64_t>(j) * sn, sn, dataset.basis[j].sigma.ptr());
}

TruncatedSvd truncated_svd(const Tensor& image, std::int64_t rank) {
  if (image.rank() != 3) throw InvalidArgument("truncated_svd: expected a [C, H, W] image");
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (rank < 1 || rank > std::min(h, w)) throw InvalidArgument("truncated_svd: rank must lie in [1, min(H, W)]");
  TruncatedSvd out{Tensor(Shape{c, h, rank}), Tensor(Shape{c, rank, rank}), Tensor(Shape{c, rank, w})};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    Eigen::MatrixXd x = CMapRM(image.ptr() + ch * h * w, h, w);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    MapRM U(out.u.ptr() + ch * h * rank, h, rank);
    MapRM Vt(out.vt.ptr() + ch * rank * w, rank, w);
    U = svd.matrixU().leftCols(rank);
    Vt = svd.matrixV().leftCols(rank).transpose();
    for (std::int64_t i = 0; i < rank; ++i) out.sigma[(ch * rank + i) * rank + i] = svd.singularValues()(i);
  }
  return out;
}

BasisBlock project(const MapperSet& mapper, const Tensor& image) {
  const auto c = mapper.u.dim(0), h = mapper.u.dim(1), r = mapper.u.dim(2), w = mapper.vt.dim(2);
  require_shape(image, {c, h, w}, "project: image");
  BasisBlock block{mapper.id, Tensor(Shape{c, r, r})};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    CMapRM U(mapper.u.ptr() + ch * h * r, h, r);
    CMapRM V(mapper.vt.ptr() + ch * r * w, r, w);
    CMapRM X(image.ptr() + ch * h * w, h, w);
    MapRM S(block.sigma.ptr() + ch * r * r, r, r);
    S.noalias() = U.transpose() * X * V.transpose();
  }
  return block;
}

InitScheme parse_init_scheme(const std::string& name) {
  if (name == "svd_real") return InitScheme::SvdReal;
  if (name == "random") return InitScheme::Random;
  throw ConfigError("unknown init scheme '" + name + "' (expected svd_real or random)");
}

std::string to_string(InitScheme scheme) { return scheme == InitScheme::SvdReal ? "svd_real" : "random"; }

SyntheticDataset init_dataset(ImagePool& pool, const StoragePlan& plan, InitScheme scheme, std::uint64_t seed) {
  const ImageShape shape{plan.channels, plan.height, plan.width};
  if (pool.source().shape() != shape) throw InvalidArgument("init_dataset: pool image shape does not match plan");
  if (plan.images != plan.mappers * plan.blocks_per_mapper || plan.images < 1)
    throw InvalidArgument("init_dataset: inconsistent plan");

  SyntheticDataset ds;
  ds.meta = plan.meta();
  const auto c = plan.channels, r = plan.rank, k = plan.mappers, m = plan.blocks_per_mapper;
  const auto nc = plan.num_classes;
  std::mt19937_64 rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(r));

  for (std::int64_t i = 0; i < k; ++i) {
    MapperSet mapper{static_cast<int>(i), {}, {}};
    if (!plan.lowrank) {
      mapper.u = identity_stack(c, r);
      mapper.vt = identity_stack(c, r);
    } else if (scheme == InitScheme::SvdReal) {
      auto svd = truncated_svd(pool.draw(static_cast<int>(i % nc)), r);
      mapper.u = std::move(svd.u);
      mapper.vt = std::move(svd.vt);
    } else {
      mapper.u = normal_tensor({c, plan.height, r}, stddev, rng);
      mapper.vt = normal_tensor({c, r, plan.width}, stddev, rng);
    }
    ds.mappers.push_back(std::move(mapper));
  }
  for (std::int64_t j = 0; j < k * m; ++j) {
    const auto& mapper = ds.mappers[static_cast<std::size_t>(j / m)];
    BasisBlock block;
    if (scheme == InitScheme::SvdReal) {
      block = project(mapper, pool.draw(static_cast<int>(j % nc)));
    } else {
      block.mapper_id = mapper.id;
      block.sigma = normal_tensor({c, r, r}, plan.lowrank ? stddev : 1.0, rng);
    }
    ds.basis.push_back(std::move(block));
  }
  ds.validate();
  return ds;
}

std::int64_t numerical_rank(const Tensor& matrix, double rel_tol) {
  if (matrix.rank() != 2) throw InvalidArgument("numerical_rank: expected a matrix");
  Eigen::MatrixXd x = CMapRM(matrix.ptr(), matrix.dim(0), matrix.dim(1));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  std::int64_t n = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * s(0)) ++n;
  return n;
}

}  // namespace lss::lowrank
