#pragma once

#include <map>
#include <string>
#include <vector>

#include "synergen/tensor.hpp"

namespace synergen {

// One trainable tensor plus AdamW moments. `sparse` marks the collaborative
// tables, which get their own learning rate and row-local moment updates.
struct Param {
    std::string name;
    Tensor value;
    Tensor m;
    Tensor v;
    bool sparse = false;
};

class ParamStore {
public:
    int add(const std::string& name, Tensor value, bool sparse) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
        const int id = static_cast<int>(params_.size());
        Param p;
        p.name = name;
        p.m = Tensor::zeros(value.rows(), value.cols());
        p.v = Tensor::zeros(value.rows(), value.cols());
        p.value = std::move(value);
        p.sparse = sparse;
        params_.push_back(std::move(p));
        index_[name] = id;
        return id;
    }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }

    Param& at(int i) { return params_[i]; }
    const Param& at(int i) const { return params_[i]; }
    Param& get(const std::string& name) { return params_[index_of(name)]; }
    const Param& get(const std::string& name) const { return params_[index_of(name)]; }

    size_t count() const { return params_.size(); }
    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

private:
    std::vector<Param> params_;
    std::map<std::string, int> index_;
};

}  // namespace synergen
