// Python bindings for the numeric core: colorspace/DCT trigger math, the
// smoothing and information-theoretic estimators, and the clustering pieces.
// Heavy pipelines (training, full runs) stay on the C++ CLI.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "backlab/analysis.hpp"
#include "backlab/defense_data.hpp"
#include "backlab/defense_model.hpp"
#include "backlab/trigger.hpp"

namespace py = pybind11;
using namespace backlab;

namespace {

Eigen::MatrixXd to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    check(a.ndim() == 2, "expected a 2-D array");
    Eigen::MatrixXd m(a.shape(0), a.shape(1));
    auto r = a.unchecked<2>();
    for (py::ssize_t i = 0; i < a.shape(0); ++i)
        for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = r(i, j);
    return m;
}

py::array_t<double> from_matrix(const Eigen::MatrixXd& m) {
    py::array_t<double> out({m.rows(), m.cols()});
    auto w = out.mutable_unchecked<2>();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) w(i, j) = m(i, j);
    return out;
}

Image to_image(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    check(a.ndim() == 3, "expected an (h, w, c) array");
    Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
              static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), img.v.begin());
    return img;
}

py::array_t<double> from_image(const Image& img) {
    py::array_t<double> out({static_cast<py::ssize_t>(img.h), static_cast<py::ssize_t>(img.w),
                             static_cast<py::ssize_t>(img.c)});
    std::copy(img.v.begin(), img.v.end(), out.mutable_data());
    return out;
}

analysis::FeatureBank to_bank(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
    check(x.ndim() == 2, "expected an (n, d) array");
    analysis::FeatureBank bank;
    bank.n = static_cast<int>(x.shape(0));
    bank.d = static_cast<int>(x.shape(1));
    bank.num_classes = 1;
    bank.feats.assign(x.data(), x.data() + x.size());
    bank.labels.assign(bank.n, 0);
    bank.poison.assign(bank.n, false);
    return bank;
}

}  // namespace

PYBIND11_MODULE(_backlab, m) {
    m.doc() = "numeric core of the backlab toolkit";

    m.def("dct2", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
        return from_matrix(trigger::block_dct2(to_matrix(a)));
    });
    m.def("idct2", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
        return from_matrix(trigger::block_idct2(to_matrix(a)));
    });
    m.def("rgb_to_ycbcr",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
              return from_image(trigger::rgb_to_ycbcr(to_image(a)));
          });
    m.def("ycbcr_to_rgb",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
              return from_image(trigger::ycbcr_to_rgb(to_image(a)));
          });
    m.def(
        "apply_functional",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           double magnitude, int block, const std::vector<int>& bands,
           const std::vector<int>& channels) {
            trigger::FunctionalTrigger fun;
            fun.magnitude = magnitude;
            fun.block = block;
            fun.bands = bands;
            fun.channels = channels;
            return from_image(trigger::apply_functional(to_image(a), fun));
        },
        py::arg("img"), py::arg("magnitude") = 100.0, py::arg("block") = 32,
        py::arg("bands") = std::vector<int>{15, 31},
        py::arg("channels") = std::vector<int>{1, 2});

    m.def(
        "savgol",
        [](const std::vector<double>& y, int window, int order) {
            return defense::savitzky_golay(y, window, order);
        },
        py::arg("y"), py::arg("window") = 5, py::arg("order") = 2);

    m.def(
        "ksg_mi",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& y, int k,
           std::uint64_t seed, double jitter) {
            auto est = analysis::ksg_mutual_information(to_matrix(x), to_matrix(y), k, seed, jitter);
            return py::make_tuple(est.mi_nats, est.degenerate);
        },
        py::arg("x"), py::arg("y"), py::arg("k") = 5, py::arg("seed") = 1,
        py::arg("jitter") = 1e-10);

    m.def("shannon_entropy_bits", &defense::shannon_entropy_bits);
    m.def("digamma", &digamma);
    m.def(
        "spectral_norm",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a, double tol,
           int max_iters) { return defense::spectral_norm_power(to_matrix(a), tol, max_iters); },
        py::arg("a"), py::arg("tol") = 1e-9, py::arg("max_iters") = 1000);

    m.def(
        "dbscan",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double eps,
           int n_min) {
            auto res = defense::dbscan(to_bank(x), eps, n_min);
            return py::make_tuple(res.labels, res.num_clusters);
        },
        py::arg("x"), py::arg("eps"), py::arg("n_min"));
    m.def(
        "kdistance_knee",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, int K) {
            auto res = defense::k_distance_knee(to_bank(x), K);
            return py::make_tuple(res.epsilon, res.index, res.degenerate);
        },
        py::arg("x"), py::arg("K"));
    m.def(
        "silhouette",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const std::vector<int>& assign) { return defense::silhouette_score(to_matrix(x), assign); },
        py::arg("x"), py::arg("assign"));

    m.attr("__version__") = "0.1.0";
}
