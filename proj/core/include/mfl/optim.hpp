#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mfl/tensor.hpp"

namespace mfl {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

// Updates skip parameters with requires_grad == false; a trainable parameter
// without a populated grad is a state error. Grads are left untouched;
// call zero_grads() explicitly between steps.
void zero_grads(ParamList& params);

class Sgd {
public:
    explicit Sgd(double lr) : lr_(lr) {}
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    void step(ParamList& params);

private:
    double lr_;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    const AdamWConfig& config() const { return cfg_; }
    void step(ParamList& params);

private:
    struct State {
        std::vector<double> m, v;
    };
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::unordered_map<const detail::TensorImpl*, State> state_;
};

// Cosine decay from lr0 to lr0 * min_frac over total_steps.
double cosine_lr(double lr0, double min_frac, std::int64_t step, std::int64_t total_steps);

}  // namespace mfl
