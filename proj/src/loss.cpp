#include "pban/loss.hpp"

namespace pban {

template <typename S>
Var<S> mse_loss(const Var<S>& pred, const Tensor<S>& target) {
    const Shape& ps = pred.shape();
    const bool column = ps.size() == 2 && ps[1] == 1;
    const bool flat = ps.size() == 1;
    if (!(column || flat) || target.shape() != Shape{ps[0]}) {
        throw DimensionError("mse_loss: prediction " + shape_str(ps) + " and target " +
                             shape_str(target.shape()) + " do not align");
    }
    const Index batch = ps[0];
    if (batch < 1) throw DimensionError("mse_loss: empty batch");
    VectorX<S> diff = pred.value().vec() - target.vec();
    const S loss = diff.squaredNorm() / S(batch);
    return make_node<S>("mse_loss", Tensor<S>::scalar(loss), {pred},
                        [pred, diff, batch](const Tensor<S>& g) {
                            if (auto* gp = grad_sink(pred)) gp->vec() += diff * (S(2) * g[0] / S(batch));
                        });
}

template Var<float> mse_loss(const Var<float>&, const Tensor<float>&);
template Var<double> mse_loss(const Var<double>&, const Tensor<double>&);

}  // namespace pban
