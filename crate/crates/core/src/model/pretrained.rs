//! Backbone initialization from a torchvision-named safetensors file.

use std::path::Path;

use rtcan_tensor::{Scalar, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::Model;
use crate::error::{io_err, Error, Result};

pub(crate) fn tensor_from_view<T: Scalar>(name: &str, view: &TensorView<'_>) -> Result<Tensor<T>> {
    let bytes = view.data();
    let data: Vec<T> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::from(f32::from_le_bytes(b.try_into().unwrap())).unwrap())
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::from(f64::from_le_bytes(b.try_into().unwrap())).unwrap())
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}")));
        }
    };
    Ok(Tensor::new(view.shape(), data)?)
}

/// Copy ResNet weights into both encoders. A single-channel thermal stem gets
/// the pretrained RGB kernel summed over its input channels. Returns the
/// number of tensors written.
pub fn load_backbone<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let targets: Vec<(String, String)> = model
        .params
        .iter()
        .filter_map(|(_, name, _, _)| {
            ["rgb_encoder.", "thermal_encoder."]
                .iter()
                .find_map(|p| name.strip_prefix(p))
                .map(|key| (name.to_string(), key.to_string()))
        })
        .collect();
    let mut loaded = 0;
    for (name, key) in targets {
        let view = st
            .tensor(&key)
            .map_err(|_| Error::Checkpoint(format!("pretrained file lacks `{key}`")))?;
        let mut value = tensor_from_view::<T>(&key, &view)?;
        let id = model.params.id(&name).expect("name from store");
        let want = model.params.get(id).shape().to_vec();
        if value.shape() != want.as_slice() {
            let s = value.shape().to_vec();
            if key == "conv1.weight" && s.len() == 4 && want.len() == 4 && want[1] == 1 && s[0] == want[0] && s[2..] == want[2..] {
                value = sum_input_channels(&value);
            } else {
                return Err(Error::ArchitectureMismatch(format!(
                    "pretrained `{key}` has shape {s:?}, model expects {want:?}"
                )));
            }
        }
        model.params.set(id, value)?;
        loaded += 1;
    }
    log::info!("loaded {loaded} pretrained backbone tensors from {}", path.display());
    Ok(loaded)
}

/// `[O, I, K, K] -> [O, 1, K, K]`.
pub fn sum_input_channels<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let s = w.shape();
    let (o, i, kk) = (s[0], s[1], s[2] * s[3]);
    Tensor::from_fn(&[o, 1, s[2], s[3]], |idx| {
        let (oo, k) = (idx / kk, idx % kk);
        (0..i).map(|c| w.data()[(oo * i + c) * kk + k]).fold(T::zero(), |a, b| a + b)
    })
}
