//! Retinex low-light enhancement.
//!
//! A decomposition net splits an image `S` into reflectance `R` and
//! illumination `I` with `S ≈ R∘I`; it is trained on low/normal-light pairs
//! so both images share one reflectance. An enhancement net then re-lights
//! the low-light illumination, and the output image is `R_low∘Î`.

mod loss;
mod nets;
mod train;

pub use loss::{
    decom_loss_node, enhance_loss_node, enhance_total_loss, loss_ir, loss_is, loss_recon,
    recon_loss_node, reflectance_loss_node, smoothness_loss_node, weighted_tv_node,
    LossCoefficients, LOW, NORMAL,
};
pub use nets::{ConvLayer, ConvStack, DecomConfig, DecomNet, EnhanceConfig, EnhanceNet};
pub use train::{train_decom, train_decom_from, train_enhance, TrainConfig, TrainHistory};

use crate::autodiff::Graph;
use crate::container::NamedTensors;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_unit_rgb(t: &Tensor, what: &str) -> Result<()> {
    match t.dims3()? {
        (3, _, _) => {}
        (c, _, _) => return Err(Error::shape(format!("{what} must have 3 channels, got {c}"))),
    }
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{what} has value {v} outside [0, 1]")));
    }
    Ok(())
}

/// A low-light image and its normal-light counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub low: Tensor,
    pub normal: Tensor,
}

impl ImagePair {
    pub fn new(low: Tensor, normal: Tensor) -> Result<Self> {
        check_unit_rgb(&low, "low-light image")?;
        check_unit_rgb(&normal, "normal-light image")?;
        if low.shape() != normal.shape() {
            return Err(Error::shape(format!(
                "pair shapes differ: {:?} vs {:?}",
                low.shape(),
                normal.shape()
            )));
        }
        Ok(Self { low, normal })
    }
}

/// Reflectance (`3×H×W`) and illumination (`1×H×W`) of an RGB image in `[0,1]`.
pub fn decom_forward(image: &Tensor, net: &DecomNet) -> Result<(Tensor, Tensor)> {
    check_unit_rgb(image, "input image")?;
    let mut g = Graph::new();
    let s = g.leaf(image.clone());
    let params = net.register(&mut g);
    let (r, i) = net.forward_node(&mut g, s, &params)?;
    Ok((g.value(r).clone(), g.value(i).clone()))
}

/// Decomposition loss of one pair under `net`.
pub fn decom_total_loss(pair: &ImagePair, net: &DecomNet, coeffs: &LossCoefficients) -> Result<f64> {
    coeffs.validate()?;
    let mut g = Graph::new();
    let params = net.register(&mut g);
    let s = [g.leaf(pair.low.clone()), g.leaf(pair.normal.clone())];
    let (r_low, i_low) = net.forward_node(&mut g, s[LOW], &params)?;
    let (r_normal, i_normal) = net.forward_node(&mut g, s[NORMAL], &params)?;
    let loss = decom_loss_node(&mut g, [r_low, r_normal], [i_low, i_normal], s, coeffs)?;
    Ok(g.value(loss).item())
}

/// Adjusted illumination `Î` for a decomposed low-light image.
pub fn enhance_forward(r_low: &Tensor, i_low: &Tensor, net: &EnhanceNet) -> Result<Tensor> {
    let mut g = Graph::new();
    let r = g.leaf(r_low.clone());
    let i = g.leaf(i_low.clone());
    let params = net.register(&mut g);
    let out = net.forward_node(&mut g, r, i, &params)?;
    Ok(g.value(out).clone())
}

/// Source of the illumination multiplied onto the reflectance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Illumination {
    #[default]
    Enhanced,
    /// `Î ≡ 1`; the output is the reflectance itself.
    Unit,
}

/// `clamp(R_low ∘ Î)` for a low-light RGB image.
pub fn enhance_image(s_low: &Tensor, decom: &DecomNet, enhance: &EnhanceNet) -> Result<Tensor> {
    enhance_image_with(s_low, decom, enhance, Illumination::Enhanced)
}

pub fn enhance_image_with(
    s_low: &Tensor,
    decom: &DecomNet,
    enhance: &EnhanceNet,
    illumination: Illumination,
) -> Result<Tensor> {
    let (_, h, w) = s_low.dims3()?;
    enhance.config.check_dims(h, w)?;
    let (r, i) = decom_forward(s_low, decom)?;
    let i_hat = match illumination {
        Illumination::Enhanced => enhance_forward(&r, &i, enhance)?,
        Illumination::Unit => Tensor::full(&[1, h, w], 1.0),
    };
    let plane = h * w;
    Ok(Tensor::from_fn(r.shape(), |k| {
        (r.data()[k] * i_hat.data()[k % plane]).clamp(0.0, 1.0)
    }))
}

/// Both networks plus the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinexModel {
    pub decom: DecomNet,
    pub enhance: EnhanceNet,
    pub coeffs: LossCoefficients,
    pub seed: u64,
}

impl RetinexModel {
    pub fn to_container(&self) -> NamedTensors {
        let mut c = NamedTensors::new();
        for (name, t) in self.decom.named_tensors().into_iter().chain(self.enhance.named_tensors()) {
            c.insert(name, t);
        }
        let d = &self.decom.config;
        let e = &self.enhance.config;
        c.set_meta("decom.channels", d.channels);
        c.set_meta("decom.hidden_layers", d.hidden_layers);
        c.set_meta("decom.kernel_size", d.kernel_size);
        c.set_meta("enhance.scales", e.scales);
        c.set_meta("enhance.channels", e.channels);
        let k = &self.coeffs;
        c.set_meta("lambda.low_low", k.recon[LOW][LOW]);
        c.set_meta("lambda.low_normal", k.recon[LOW][NORMAL]);
        c.set_meta("lambda.normal_low", k.recon[NORMAL][LOW]);
        c.set_meta("lambda.normal_normal", k.recon[NORMAL][NORMAL]);
        c.set_meta("lambda.ir", k.ir);
        c.set_meta("lambda.is", k.is);
        c.set_meta("lambda.g", k.g);
        c.set_meta("seed", self.seed);
        c
    }

    pub fn from_container(c: &NamedTensors) -> Result<Self> {
        let decom_config = DecomConfig {
            channels: c.meta_parse("decom.channels")?,
            hidden_layers: c.meta_parse("decom.hidden_layers")?,
            kernel_size: c.meta_parse("decom.kernel_size")?,
        };
        let enhance_config = EnhanceConfig {
            scales: c.meta_parse("enhance.scales")?,
            channels: c.meta_parse("enhance.channels")?,
        };
        let coeffs = LossCoefficients {
            recon: [
                [c.meta_parse("lambda.low_low")?, c.meta_parse("lambda.low_normal")?],
                [c.meta_parse("lambda.normal_low")?, c.meta_parse("lambda.normal_normal")?],
            ],
            ir: c.meta_parse("lambda.ir")?,
            is: c.meta_parse("lambda.is")?,
            g: c.meta_parse("lambda.g")?,
        };
        Ok(Self {
            decom: DecomNet::from_named(decom_config, &c.tensors)?,
            enhance: EnhanceNet::from_named(enhance_config, &c.tensors)?,
            coeffs,
            seed: c.meta_parse("seed")?,
        })
    }
}
