mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use conv::{conv3d, conv_transpose3d, max_pool3d, Conv3dOpts};
pub use elementwise::broadcast_shape;
pub use linalg::{bmm, linear, softmax_last};
pub use norm::{instance_norm, layer_norm};
pub use shape::{cat, odometer, permute_index, ZERO_FILL};

pub(crate) use elementwise::sigmoid_scalar;
