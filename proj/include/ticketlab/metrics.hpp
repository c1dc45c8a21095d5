#pragma once

// Evaluation metrics: Frechet distance between feature Gaussians, an
// inception-style score over classifier probabilities, reconstruction /
// downstream accuracy through a small trained feature extractor, and
// loss-curve early-stop detection.

#include <cstdint>
#include <string>
#include <vector>

#include "ticketlab/dataio.hpp"
#include "ticketlab/models.hpp"

namespace tl::metrics {

struct FeatureStats {
    std::vector<double> mu;     // d
    std::vector<double> sigma;  // d x d, row-major, symmetric
    int d = 0;
    std::int64_t n = 0;
    bool regularized = false;  // 1e-6 I added (n <= d)
};

// Sample mean and covariance (n-1 divisor) of row-major features (n x d).
FeatureStats compute_stats(const std::vector<double>& features, int n, int d);

// Symmetric eigendecomposition by cyclic Jacobi rotations. `vecs` is
// column-major: column j is the eigenvector of evals[j].
void jacobi_eigen_sym(const std::vector<double>& a, int n, std::vector<double>& evals,
                      std::vector<double>& vecs);

// Principal square root of a symmetric PSD matrix; eigenvalues slightly
// negative from roundoff are clamped to zero.
std::vector<double> matrix_sqrt_psd(const std::vector<double>& a, int d);

// ||mu_r - mu_g||^2 + Tr(Sr) + Tr(Sg) - 2 Tr((Sr^1/2 Sg Sr^1/2)^1/2)
double fid(const FeatureStats& real, const FeatureStats& gen);

// exp(mean_i KL(p(y|x_i) || marginal)); probs row-major (n x c)
double inception_like_score(const std::vector<double>& probs, int n, int c);

// Small conv classifier standing in for the usual inception network:
// features are the 32-dim penultimate activations.
struct FeatureExtractor {
    models::ModelConfig data_shape;  // family unused; carries image geometry
    std::vector<std::unique_ptr<models::Layer>> trunk;  // ... -> (n, feature_dim)
    std::unique_ptr<models::Linear> head;               // feature_dim -> classes
    int feature_dim = 32;
    int classes = 0;
    double test_accuracy = 0.0;
    std::uint64_t seed = 0;
    std::string fingerprint;  // identifies the trained weights

    std::vector<double> features(const TensorPtr& images);       // n x feature_dim
    std::vector<double> probabilities(const TensorPtr& images);  // n x classes
    double accuracy(const TensorPtr& images, const std::vector<int>& labels);
};

// Trains the extractor on the dataset's train split; errors if the held-out
// accuracy lands under the floor (the metric would be meaningless).
FeatureExtractor train_extractor(const io::Dataset& train, const io::Dataset& test,
                                 std::uint64_t seed, double accuracy_floor = 0.9,
                                 int epochs = 30);

double downstream_accuracy(const TensorPtr& images, const std::vector<int>& labels,
                           FeatureExtractor& fx);

// FID through a shared extractor; covariances regularized when sample-starved.
double fid_between(FeatureExtractor& fx, const TensorPtr& real, const TensorPtr& gen);

// Index of the patience-th consecutive non-improving point (improvement must
// beat min_delta against the best seen); curve length if never triggered.
int early_stop_iteration(const std::vector<double>& curve, int patience = 5,
                         double min_delta = 1e-4);

}  // namespace tl::metrics
