#include "gram/tensor.hpp"

namespace gram {

template class TensorT<float>;
template class TensorT<double>;
template class TapeT<float>;
template class TapeT<double>;

}  // namespace gram
