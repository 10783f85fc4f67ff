#pragma once

#include <fftw3.h>

#include <complex>
#include <memory>
#include <stdexcept>
#include <vector>

namespace ssed {

/// Real <-> half-complex FFT of a fixed length. Plans are created once with
/// FFTW_ESTIMATE, which keeps results reproducible run to run. Not thread-safe.
class RealFft {
public:
    explicit RealFft(std::size_t n) : n_(n)
    {
        if (n < 2) throw std::invalid_argument("RealFft: length must be >= 2");
        real_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
        cplx_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
        if (!real_ || !cplx_) throw std::bad_alloc();
        forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), real_, cplx_, FFTW_ESTIMATE);
        inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), cplx_, real_, FFTW_ESTIMATE);
    }
    ~RealFft()
    {
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(inverse_);
        fftw_free(real_);
        fftw_free(cplx_);
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    std::size_t size() const { return n_; }
    std::size_t bins() const { return n_ / 2 + 1; }

    /// Unnormalized forward transform; returns bins 0..n/2.
    std::vector<std::complex<double>> forward(const std::vector<double>& x)
    {
        if (x.size() != n_) throw std::invalid_argument("RealFft::forward: length mismatch");
        std::copy(x.begin(), x.end(), real_);
        fftw_execute(forward_);
        std::vector<std::complex<double>> out(bins());
        for (std::size_t k = 0; k < bins(); ++k) out[k] = {cplx_[k][0], cplx_[k][1]};
        return out;
    }

    /// Inverse of forward(): includes the 1/n normalization.
    std::vector<double> inverse(const std::vector<std::complex<double>>& spec)
    {
        if (spec.size() != bins()) throw std::invalid_argument("RealFft::inverse: bin count mismatch");
        for (std::size_t k = 0; k < bins(); ++k) {
            cplx_[k][0] = spec[k].real();
            cplx_[k][1] = spec[k].imag();
        }
        fftw_execute(inverse_);
        std::vector<double> out(real_, real_ + n_);
        const double s = 1.0 / static_cast<double>(n_);
        for (auto& v : out) v *= s;
        return out;
    }

    /// Full-length magnitude spectrum |X_k|, k = 0..n-1.
    std::vector<double> magnitudes(const std::vector<double>& x)
    {
        auto half = forward(x);
        std::vector<double> mag(n_);
        for (std::size_t k = 0; k < bins(); ++k) mag[k] = std::abs(half[k]);
        for (std::size_t k = bins(); k < n_; ++k) mag[k] = mag[n_ - k];
        return mag;
    }

private:
    std::size_t n_;
    double* real_ = nullptr;
    fftw_complex* cplx_ = nullptr;
    fftw_plan forward_ = nullptr;
    fftw_plan inverse_ = nullptr;
};

}  // namespace ssed
