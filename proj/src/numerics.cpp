#include "finegates/numerics.h"

#include <Eigen/Dense>

#include <algorithm>
#include <numbers>

namespace finegates {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DegenerateVariance: return "DegenerateVariance";
    case ErrorKind::NotSymmetric: return "NotSymmetric";
    case ErrorKind::WeightsNotNormalized: return "WeightsNotNormalized";
    case ErrorKind::CacheMismatch: return "CacheMismatch";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::CheckpointMissing: return "CheckpointMissing";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::Diverged: return "Diverged";
    case ErrorKind::EmptyLayer: return "EmptyLayer";
    case ErrorKind::SnapshotsMissing: return "SnapshotsMissing";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::AssumptionViolated: return "AssumptionViolated";
    case ErrorKind::MalformedRow: return "MalformedRow";
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::EmptyFile: return "EmptyFile";
    case ErrorKind::BadSpec: return "BadSpec";
  }
  return "Unknown";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul: inner dimensions differ");
  Matrix out;
  matmul_into(a, b, out);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "matmul_nt: inner dimensions differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ar, b.row(j));
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul_tn: inner dimensions differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ai = a(r, i);
      if (ai == 0.0) continue;
      double* o = out.data() + i * b.cols();
      const double* br = b.data() + r * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += ai * br[j];
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "add: shapes differ");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += b.values()[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "subtract: shapes differ");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] -= b.values()[i];
  return out;
}

double frobenius_sq(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double erf(double x) { return std::erf(x); }

double pearson_kurtosis(std::span<const double> v) {
  if (v.size() < 2) throw Error(ErrorKind::ShapeMismatch, "kurtosis needs at least two values");
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double c = x - mean;
    const double c2 = c * c;
    m2 += c2;
    m4 += c2 * c2;
  }
  m2 /= n;
  m4 /= n;
  if (m2 <= kDegenerateVariance) throw Error(ErrorKind::DegenerateVariance, "variance below threshold");
  return m4 / (m2 * m2);
}

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t RngStream::next_u64() {
  const std::uint64_t base = mix64(seed_ + kGolden);
  return mix64(base + (counter_++ + 1) * kGolden);
}

double RngStream::next_uniform() {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::next_normal() {
  const double u1 = next_uniform();
  const double u2 = next_uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::next_below(std::uint64_t n) {
  const unsigned __int128 prod = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(prod >> 64);
}

RngStream RngStream::fork(std::uint64_t tag) const {
  return RngStream(mix64(mix64(seed_ ^ 0x5851f42d4c957f2dULL) + mix64(tag + kGolden)), 0);
}

Vector gauss_sample(RngStream& rng, std::size_t n, double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorKind::BadConfig, "gauss_sample: sigma must be positive");
  Vector out(n);
  for (auto& v : out) v = sigma * rng.next_normal();
  return out;
}

void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  }
  return e;
}

void require_symmetric(const Matrix& m) {
  if (m.rows() != m.cols()) throw Error(ErrorKind::NotSymmetric, "matrix is not square");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = r + 1; c < m.cols(); ++c) {
      if (std::abs(m(r, c) - m(c, r)) > 1e-10) throw Error(ErrorKind::NotSymmetric, "matrix is not symmetric");
    }
  }
}

}  // namespace

Vector eig_sym(const Matrix& m) {
  require_symmetric(m);
  if (m.rows() == 0) return {};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(m), Eigen::EigenvaluesOnly);
  const auto& ev = solver.eigenvalues();
  return Vector(ev.data(), ev.data() + ev.size());
}

double min_eig_sym(const Matrix& m) {
  if (m.rows() > 64) throw Error(ErrorKind::TooLarge, "min_eig_sym is for dimension <= 64");
  const Vector ev = eig_sym(m);
  if (ev.empty()) throw Error(ErrorKind::ShapeMismatch, "empty matrix");
  return ev.front();
}

Vector singular_values(const Matrix& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
  const auto& sv = svd.singularValues();
  return Vector(sv.data(), sv.data() + sv.size());
}

Matrix truncated_svd(const Matrix& m, std::size_t rank) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(rank), svd.singularValues().size());
  const Eigen::MatrixXd approx = svd.matrixU().leftCols(k) * svd.singularValues().head(k).asDiagonal() *
                                 svd.matrixV().leftCols(k).transpose();
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = approx(r, c);
  }
  return out;
}

Vector central_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
  if (!(h > 0.0)) throw Error(ErrorKind::BadConfig, "central_diff_grad: h must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace finegates
