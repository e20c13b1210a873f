#pragma once

// Named parameter store. Insertion order is part of the contract: checkpoint
// serialization and the optimizer walk parameters in the order they were
// registered, so identical model configs produce identical layouts.

#include <string>
#include <unordered_map>
#include <vector>

#include "ppm/common.hpp"
#include "ppm/tensor.hpp"

namespace ppm {

template <typename T>
struct RegistryT {
    struct Entry {
        TensorT<T> tensor;
        bool trainable = true;
    };

    std::vector<std::string> order;
    std::unordered_map<std::string, Entry> entries;

    TensorT<T>& add(const std::string& name, Shape shape, bool trainable = true) {
        if (entries.count(name)) throw ValueError("duplicate parameter: " + name);
        Entry e;
        e.tensor = TensorT<T>::zeros(std::move(shape), true);
        e.trainable = trainable;
        order.push_back(name);
        return entries.emplace(name, std::move(e)).first->second.tensor;
    }

    bool has(const std::string& name) const { return entries.count(name) != 0; }

    Entry& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ValueError("unknown parameter: " + name);
        return it->second;
    }

    const Entry& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ValueError("unknown parameter: " + name);
        return it->second;
    }

    TensorT<T>& tensor(const std::string& name) { return at(name).tensor; }
    const TensorT<T>& tensor(const std::string& name) const { return at(name).tensor; }

    void set_trainable(const std::string& name, bool trainable) { at(name).trainable = trainable; }

    void zero_grad() {
        for (const auto& name : order) entries[name].tensor.grad().clear();
    }

    size_t total_count() const {
        size_t n = 0;
        for (const auto& name : order) n += at(name).tensor.numel();
        return n;
    }

    size_t trainable_count() const {
        size_t n = 0;
        for (const auto& name : order) {
            const auto& e = at(name);
            if (e.trainable) n += e.tensor.numel();
        }
        return n;
    }

    // Same names, order, flags, and values in another scalar type. Used to
    // run a model forward in double precision for derivative checks.
    template <typename U>
    RegistryT<U> cast() const {
        RegistryT<U> out;
        for (const auto& name : order) {
            const auto& e = at(name);
            auto& t = out.add(name, e.tensor.shape(), e.trainable);
            for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<U>(e.tensor.data()[i]);
        }
        return out;
    }
};

using Registry = RegistryT<float>;

}  // namespace ppm
