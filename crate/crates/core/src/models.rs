//! The cascade k-space/image reconstruction network, its shared/local
//! parameter partition, and checkpointing.
//!
//! Two small U-Nets run in sequence: one denoises measured k-space, one
//! refines the magnitude image after the inverse transform. Each net is a
//! residual correction; optional data consistency re-imposes the measured
//! k-space samples between the two. Encoder parameters are the globally
//! shared portion of the model, decoder parameters stay client-local
//! (other partitions are available for ablations).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{complex_to_pairs, NodeId, Optimizer, Parameter, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{load_tensor, save_tensor, Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Shared,
    Local,
}

/// Which parameters the protocol treats as globally shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Both encoders shared, both decoders local.
    #[default]
    EncoderShared,
    /// Everything shared (the collapse used by the averaging baselines).
    AllShared,
    /// Everything shared except the image net's output head.
    AllButLastShared,
    /// Only the k-space net's first convolution shared.
    FirstLayerShared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyUNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width of the first stage; the bottleneck doubles it.
    pub base_channels: usize,
}

impl TinyUNetSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        TinyUNetSpec {
            in_channels,
            out_channels,
            base_channels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KINetSpec {
    pub knet: TinyUNetSpec,
    pub inet: TinyUNetSpec,
    pub use_data_consistency: bool,
}

impl Default for KINetSpec {
    fn default() -> Self {
        KINetSpec {
            knet: TinyUNetSpec::new(2, 2),
            inet: TinyUNetSpec::new(1, 1),
            use_data_consistency: true,
        }
    }
}

/// Ordered parameter store with one partition label per parameter.
/// Indices are stable for the lifetime of a client model, so they double
/// as optimizer state slots and tape leaf slots.
#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    params: Vec<Parameter<T>>,
    partitions: Vec<Partition>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: Vec::new(),
            partitions: Vec::new(),
        }
    }

    pub fn push(&mut self, param: Parameter<T>, partition: Partition) -> Result<usize> {
        if self.params.iter().any(|p| p.name == param.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", param.name)));
        }
        self.params.push(param);
        self.partitions.push(partition);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn partition(&self, i: usize) -> Partition {
        self.partitions[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Parameter<T>, Partition)> {
        self.params.iter().zip(self.partitions.iter().copied())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Indices of the given partition in parameter-name order. Name order,
    /// not insertion order, defines every flattened vector layout.
    pub fn sorted_indices(&self, which: Option<Partition>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.params.len())
            .filter(|&i| which.is_none_or(|w| self.partitions[i] == w))
            .collect();
        idx.sort_by(|&a, &b| self.params[a].name.cmp(&self.params[b].name));
        idx
    }

    pub fn element_count(&self, which: Option<Partition>) -> usize {
        self.iter()
            .filter(|(_, part)| which.is_none_or(|w| *part == w))
            .map(|(p, _)| p.value.data().len())
            .sum()
    }

    /// Flatten values of one partition in name order.
    pub fn flatten(&self, which: Partition) -> Vec<T> {
        let mut out = Vec::with_capacity(self.element_count(Some(which)));
        for i in self.sorted_indices(Some(which)) {
            out.extend_from_slice(self.params[i].value.data());
        }
        out
    }

    /// (shared, local) flat vectors, both name-ordered.
    pub fn split_params(&self) -> (Vec<T>, Vec<T>) {
        (self.flatten(Partition::Shared), self.flatten(Partition::Local))
    }

    /// Overwrite exactly the SHARED parameters from a flat vector.
    pub fn merge_params(&mut self, shared: &[T]) -> Result<()> {
        let want = self.element_count(Some(Partition::Shared));
        if shared.len() != want {
            return Err(Error::Dimension(format!(
                "merge_params got {} elements, shared partition holds {}",
                shared.len(),
                want
            )));
        }
        let mut off = 0;
        for i in self.sorted_indices(Some(Partition::Shared)) {
            let dst = self.params[i].value.data_mut();
            dst.copy_from_slice(&shared[off..off + dst.len()]);
            off += dst.len();
        }
        Ok(())
    }

    /// Add `scale * g` into the grads of the SHARED partition, with `g` in
    /// the same name-ordered flat layout as [`ParameterSet::flatten`].
    pub fn add_shared_grad(&mut self, g: &[T], scale: T) -> Result<()> {
        let want = self.element_count(Some(Partition::Shared));
        if g.len() != want {
            return Err(Error::Dimension(format!(
                "shared grad vector has {} elements, partition holds {want}",
                g.len()
            )));
        }
        let mut off = 0;
        for i in self.sorted_indices(Some(Partition::Shared)) {
            let dst = self.params[i].grad.data_mut();
            for d in dst.iter_mut() {
                *d += scale * g[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Route gradients from a finished backward pass into this store.
    pub fn add_tape_grads(&mut self, tape: &Tape<T>) {
        for (slot, g) in tape.param_grads() {
            let dst = self.params[slot].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += *s;
            }
        }
    }

    /// One optimizer update over the chosen partition (or all parameters).
    pub fn step(
        &mut self,
        opt: &mut Optimizer<T>,
        lr: T,
        which: Option<Partition>,
    ) -> Result<()> {
        let parts = &self.partitions;
        opt.step(
            self.params
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| which.is_none_or(|w| parts[*i] == w)),
            lr,
        )
    }

    /// Canonical bytes of one partition's values (name order, f64 LE per
    /// element). Equal byte strings iff equal values; used for freeze audits.
    pub fn partition_bytes(&self, which: Partition) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.element_count(Some(which)));
        for i in self.sorted_indices(Some(which)) {
            for v in self.params[i].value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlots {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct UNetLayout {
    c1: ConvSlots,
    c2: ConvSlots,
    c3: ConvSlots,
    c4: ConvSlots,
    c5: ConvSlots,
    c6: ConvSlots,
    head: ConvSlots,
}

/// Slot layout of a built cascade network. The layout refers to positions
/// inside the [`ParameterSet`] it was built with.
#[derive(Debug, Clone)]
pub struct KINet {
    pub spec: KINetSpec,
    knet: UNetLayout,
    inet: UNetLayout,
}

/// Layer role within a net, used to assign partition labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Encoder,
    Decoder,
    Head,
}

fn assign_partition(mode: PartitionMode, net: &str, layer: &str, stage: Stage) -> Partition {
    match mode {
        PartitionMode::EncoderShared => match stage {
            Stage::Encoder => Partition::Shared,
            Stage::Decoder | Stage::Head => Partition::Local,
        },
        PartitionMode::AllShared => Partition::Shared,
        PartitionMode::AllButLastShared => {
            if net == "inet" && stage == Stage::Head {
                Partition::Local
            } else {
                Partition::Shared
            }
        }
        PartitionMode::FirstLayerShared => {
            if net == "knet" && layer == "c1" {
                Partition::Shared
            } else {
                Partition::Local
            }
        }
    }
}

fn build_unet<T: Scalar>(
    set: &mut ParameterSet<T>,
    net: &str,
    spec: &TinyUNetSpec,
    mode: PartitionMode,
    rng: &mut impl Rng,
) -> Result<UNetLayout> {
    if spec.in_channels == 0 || spec.out_channels == 0 || spec.base_channels == 0 {
        return Err(Error::Config(format!("{net}: channel counts must be positive")));
    }
    let c = spec.base_channels;
    let mut conv = |layer: &str, stage: Stage, cin: usize, cout: usize, k: usize, zero: bool| {
        let part = assign_partition(mode, net, layer, stage);
        let mut w = Tensor::zeros(&[cout, cin, k, k]);
        if !zero {
            // He-style fan-in uniform init.
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            for v in w.data_mut() {
                *v = T::cast(rng.gen_range(-bound..bound));
            }
        }
        let wi = set.push(Parameter::new(format!("{net}.{layer}.w"), w), part)?;
        let bi = set.push(
            Parameter::new(format!("{net}.{layer}.b"), Tensor::zeros(&[cout])),
            part,
        )?;
        Ok::<ConvSlots, Error>(ConvSlots { w: wi, b: bi })
    };

    Ok(UNetLayout {
        c1: conv("c1", Stage::Encoder, spec.in_channels, c, 3, false)?,
        c2: conv("c2", Stage::Encoder, c, c, 3, false)?,
        c3: conv("c3", Stage::Encoder, c, 2 * c, 3, false)?,
        c4: conv("c4", Stage::Encoder, 2 * c, 2 * c, 3, false)?,
        c5: conv("c5", Stage::Decoder, 3 * c, c, 3, false)?,
        c6: conv("c6", Stage::Decoder, c, c, 3, false)?,
        // The output heads start at zero so an untrained cascade is exactly
        // the zero-filled reconstruction.
        head: conv("head", Stage::Head, c, spec.out_channels, 1, true)?,
    })
}

/// Build the cascade model. The returned layout indexes the returned set.
pub fn build_kinet<T: Scalar>(
    spec: &KINetSpec,
    mode: PartitionMode,
    rng: &mut impl Rng,
) -> Result<(KINet, ParameterSet<T>)> {
    if spec.knet.in_channels != 2 || spec.knet.out_channels != 2 {
        return Err(Error::Config("k-space net must have 2 in/out channels".into()));
    }
    if spec.inet.in_channels != 1 || spec.inet.out_channels != 1 {
        return Err(Error::Config("image net must have 1 in/out channel".into()));
    }
    let mut set = ParameterSet::new();
    let knet = build_unet(&mut set, "knet", &spec.knet, mode, rng)?;
    let inet = build_unet(&mut set, "inet", &spec.inet, mode, rng)?;
    Ok((
        KINet {
            spec: *spec,
            knet,
            inet,
        },
        set,
    ))
}

fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layout: &UNetLayout,
    params: &ParameterSet<T>,
    input: NodeId,
) -> Result<NodeId> {
    let conv = |tape: &mut Tape<T>, slots: ConvSlots, x: NodeId| -> Result<NodeId> {
        let w = tape.param(slots.w, &params.params()[slots.w]);
        let b = tape.param(slots.b, &params.params()[slots.b]);
        tape.conv2d(x, w, b)
    };
    let h1 = conv(tape, layout.c1, input)?;
    let h1 = tape.relu(h1);
    let h2 = conv(tape, layout.c2, h1)?;
    let h2 = tape.relu(h2);
    let p = tape.avgpool2(h2)?;
    let h3 = conv(tape, layout.c3, p)?;
    let h3 = tape.relu(h3);
    let h4 = conv(tape, layout.c4, h3)?;
    let h4 = tape.relu(h4);
    let u = tape.upsample_nearest2(h4)?;
    let cat = tape.concat_channels(u, h2)?;
    let h5 = conv(tape, layout.c5, cat)?;
    let h5 = tape.relu(h5);
    let h6 = conv(tape, layout.c6, h5)?;
    let h6 = tape.relu(h6);
    conv(tape, layout.head, h6)
}

impl KINet {
    /// Run the cascade on measured k-space. Returns the tape and the output
    /// image node `[1,H,W]` so the caller can attach a loss.
    ///
    /// Pipeline: k-space viewed as a 2-channel real tensor; the k-net adds a
    /// residual; data consistency re-imposes measured samples; the magnitude
    /// of the inverse transform feeds the image net, which adds the final
    /// residual.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        k_meas: &Tensor<T>,
        mask_bits: &Tensor<T>,
    ) -> Result<(Tape<T>, NodeId)> {
        if k_meas.dtype() != Dtype::Complex || k_meas.rank() != 2 {
            return Err(Error::Dtype("forward wants complex rank-2 k-space".into()));
        }
        let (h, w) = (k_meas.shape()[0], k_meas.shape()[1]);
        if mask_bits.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match k-space {h}x{w}",
                mask_bits.shape()
            )));
        }
        let pairs = complex_to_pairs(k_meas, h, w)?;
        let mut tape = Tape::new();
        let kin = tape.constant(pairs.clone());
        let kres = unet_forward(&mut tape, &self.knet, params, kin)?;
        let ksum = tape.add(kin, kres)?;
        let kdc = if self.spec.use_data_consistency {
            tape.masked_replace(ksum, mask_bits, &pairs)?
        } else {
            ksum
        };
        let kimg = tape.ifft2_pairs(kdc)?;
        let mag = tape.complex_magnitude(kimg)?;
        let ires = unet_forward(&mut tape, &self.inet, params, mag)?;
        let out = tape.add(mag, ires)?;
        Ok((tape, out))
    }

    /// Forward pass returning just the reconstructed image `[1,H,W]`.
    pub fn reconstruct<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        k_meas: &Tensor<T>,
        mask_bits: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (tape, out) = self.forward(params, k_meas, mask_bits)?;
        Ok(tape.value(out).clone())
    }

    /// Run only the image-domain net on a real `[1,H,W]` input, bypassing
    /// the k-space half. Gradient checking exercises one U-Net through this.
    pub fn image_net_forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        image: &Tensor<T>,
    ) -> Result<(Tape<T>, NodeId)> {
        if image.dtype() != Dtype::Real || image.rank() != 3 || image.shape()[0] != 1 {
            return Err(Error::Dtype("image net wants a real [1,H,W] input".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = unet_forward(&mut tape, &self.inet, params, x)?;
        Ok((tape, out))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    partition: Partition,
    shape: Vec<usize>,
    /// Position in the parameter store; layouts index by position, so load
    /// must restore it exactly.
    index: usize,
}

/// Write one tensor file per parameter plus `manifest.json`.
pub fn save_checkpoint(set: &ParameterSet<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    for (i, (p, part)) in set.iter().enumerate() {
        let file = format!("p{i:03}.ftns");
        save_tensor(&p.value, dir.join(&file))?;
        manifest.insert(
            p.name.clone(),
            ManifestEntry {
                file,
                partition: part,
                shape: p.value.shape().to_vec(),
                index: i,
            },
        );
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ParameterSet<f32>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_str(&text).map_err(Error::from)?;

    let mut slots: Vec<Option<(Parameter<f32>, Partition)>> = Vec::new();
    slots.resize_with(manifest.len(), || None);
    for (name, entry) in &manifest {
        let t = load_tensor(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint {name}: file shape {:?} vs manifest {:?}",
                t.shape(),
                entry.shape
            )));
        }
        if entry.index >= slots.len() {
            return Err(Error::Config(format!(
                "checkpoint {name}: index {} out of range",
                entry.index
            )));
        }
        if slots[entry.index].is_some() {
            return Err(Error::Config(format!(
                "checkpoint {name}: duplicate index {}",
                entry.index
            )));
        }
        slots[entry.index] = Some((Parameter::new(name.clone(), t), entry.partition));
    }
    let mut set = ParameterSet::new();
    for (i, slot) in slots.into_iter().enumerate() {
        let (p, part) =
            slot.ok_or_else(|| Error::Config(format!("checkpoint missing index {i}")))?;
        set.push(p, part)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, OptimizerKind};
    use crate::rng::{stream, tag};
    use crate::tensor::{fft2, ifft2, max_abs_diff};

    // Frozen parameter counts for the default spec (base_channels 8):
    // k-space net 6562, image net 6481, encoders 8376 of 13043 total.
    const KNET_COUNT: usize = 6562;
    const INET_COUNT: usize = 6481;
    const ALL_COUNT: usize = 13043;
    const SHARED_COUNT: usize = 8376;

    fn default_net(seed: u64) -> (KINet, ParameterSet<f64>) {
        let mut rng = stream(seed, &[tag::INIT]);
        build_kinet(&KINetSpec::default(), PartitionMode::EncoderShared, &mut rng).unwrap()
    }

    fn random_kspace(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, &[tag::NOISE]);
        let mut t = Tensor::zeros_complex(&[h, w]);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn parameter_counts_are_frozen() {
        let (_, set) = default_net(0);
        let count = |prefix: &str| -> usize {
            set.iter()
                .filter(|(p, _)| p.name.starts_with(prefix))
                .map(|(p, _)| p.value.data().len())
                .sum()
        };
        assert_eq!(count("knet."), KNET_COUNT);
        assert_eq!(count("inet."), INET_COUNT);
        assert_eq!(set.element_count(None), ALL_COUNT);
        assert_eq!(set.element_count(Some(Partition::Shared)), SHARED_COUNT);
        // partition completeness
        assert_eq!(
            set.element_count(Some(Partition::Shared)) + set.element_count(Some(Partition::Local)),
            set.element_count(None)
        );
        let frac = SHARED_COUNT as f64 / ALL_COUNT as f64;
        assert!((frac - 0.642183).abs() < 1e-6);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let mut r1 = stream(7, &[tag::INIT]);
        let mut r2 = stream(7, &[tag::INIT]);
        let (_, a): (_, ParameterSet<f32>) =
            build_kinet(&KINetSpec::default(), PartitionMode::EncoderShared, &mut r1).unwrap();
        let (_, b): (_, ParameterSet<f32>) =
            build_kinet(&KINetSpec::default(), PartitionMode::EncoderShared, &mut r2).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn split_merge_roundtrip_is_identity() {
        let (_, mut set) = default_net(1);
        let before: Vec<u64> = set
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect();
        let (shared, local) = set.split_params();
        assert_eq!(shared.len(), SHARED_COUNT);
        assert_eq!(local.len(), ALL_COUNT - SHARED_COUNT);
        set.merge_params(&shared).unwrap();
        let after: Vec<u64> = set
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn merge_zeros_touches_only_shared() {
        let (_, mut set) = default_net(2);
        let local_before = set.flatten(Partition::Local);
        set.merge_params(&vec![0.0; SHARED_COUNT]).unwrap();
        assert!(set.flatten(Partition::Shared).iter().all(|&v| v == 0.0));
        assert_eq!(set.flatten(Partition::Local), local_before);

        assert!(matches!(
            set.merge_params(&vec![0.0; SHARED_COUNT - 1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn optimizer_step_respects_partition() {
        let (_, mut set) = default_net(3);
        let mut rng = stream(3, &[tag::GRAD_CHECK]);
        for p in set.params_mut() {
            for g in p.grad.data_mut() {
                *g = rng.gen_range(-1.0..1.0);
            }
        }
        let shared_before = set.flatten(Partition::Shared);
        let local_before = set.flatten(Partition::Local);

        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        set.step(&mut opt, 0.1, Some(Partition::Local)).unwrap();
        assert_eq!(set.flatten(Partition::Shared), shared_before);
        assert_ne!(set.flatten(Partition::Local), local_before);

        // grads of stepped params were zeroed; refill shared grads and step
        let mut rng = stream(4, &[tag::GRAD_CHECK]);
        for p in set.params_mut() {
            for g in p.grad.data_mut() {
                *g = rng.gen_range(-1.0..1.0);
            }
        }
        let local_after = set.flatten(Partition::Local);
        set.step(&mut opt, 0.1, Some(Partition::Shared)).unwrap();
        assert_eq!(set.flatten(Partition::Local), local_after);
        assert_ne!(set.flatten(Partition::Shared), shared_before);
    }

    #[test]
    fn partition_modes_cover_expected_counts() {
        for (mode, want_shared) in [
            (PartitionMode::AllShared, ALL_COUNT),
            (PartitionMode::AllButLastShared, ALL_COUNT - 9),
            (PartitionMode::FirstLayerShared, 8 * 2 * 9 + 8),
        ] {
            let mut rng = stream(5, &[tag::INIT]);
            let (_, set): (_, ParameterSet<f64>) =
                build_kinet(&KINetSpec::default(), mode, &mut rng).unwrap();
            assert_eq!(set.element_count(Some(Partition::Shared)), want_shared, "{mode:?}");
        }
    }

    #[test]
    fn zero_network_reproduces_zero_filled_recon() {
        let (net, mut set) = default_net(6);
        for p in set.params_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let k = random_kspace(8, 8, 60);
        let mut mask = Tensor::zeros(&[8, 8]);
        for (i, v) in mask.data_mut().iter_mut().enumerate() {
            *v = if i % 3 == 0 { 1.0 } else { 0.0 };
        }
        let k_meas = k.mask_mul(&mask).unwrap();
        let out = net.reconstruct(&set, &k_meas, &mask).unwrap();
        let want = ifft2(&k_meas).unwrap().magnitude().unwrap();
        let diff = max_abs_diff(&out.reshaped(&[8, 8]).unwrap(), &want).unwrap();
        assert!(diff < 1e-12, "zero net deviates {diff}");
    }

    #[test]
    fn zero_network_full_mask_restores_nonneg_image() {
        let (net, mut set) = default_net(7);
        for p in set.params_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = stream(8, &[tag::PHANTOM]);
        let y = Tensor::from_vec(&[8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let k = fft2(&y.to_complex().unwrap()).unwrap();
        let mask = Tensor::filled(&[8, 8], 1.0);
        let out = net.reconstruct(&set, &k, &mask).unwrap();
        let diff = max_abs_diff(&out.reshaped(&[8, 8]).unwrap(), &y).unwrap();
        assert!(diff < 1e-9, "full-mask identity off by {diff}");
    }

    #[test]
    fn data_consistency_is_idempotent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant({
            let mut t = Tensor::zeros(&[2, 4, 4]);
            let mut rng = stream(9, &[tag::NOISE]);
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            t
        });
        let mut mask = Tensor::zeros(&[4, 4]);
        for (i, v) in mask.data_mut().iter_mut().enumerate() {
            *v = ((i * 7) % 3 == 0) as u8 as f64;
        }
        let measured = {
            let mut t = Tensor::zeros(&[2, 4, 4]);
            let mut rng = stream(10, &[tag::NOISE]);
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            t
        };
        let once = tape.masked_replace(x, &mask, &measured).unwrap();
        let twice = tape.masked_replace(once, &mask, &measured).unwrap();
        assert_eq!(tape.value(once).data(), tape.value(twice).data());
    }

    #[test]
    fn forward_rejects_mask_mismatch() {
        let (net, set) = default_net(11);
        let k = random_kspace(8, 8, 11);
        let mask = Tensor::zeros(&[8, 4]);
        assert!(matches!(
            net.forward(&set, &k, &mask),
            Err(Error::Dimension(_))
        ));
    }

    fn kinet_grad_check(seed: u64, dc: bool) -> f64 {
        let spec = KINetSpec {
            use_data_consistency: dc,
            ..KINetSpec::default()
        };
        let mut rng = stream(seed, &[tag::INIT]);
        let (net, set): (_, ParameterSet<f64>) =
            build_kinet(&spec, PartitionMode::EncoderShared, &mut rng).unwrap();

        let k = random_kspace(8, 8, seed + 100);
        let mut mask = Tensor::zeros(&[8, 8]);
        for (i, v) in mask.data_mut().iter_mut().enumerate() {
            *v = ((i % 4) < 2) as u8 as f64;
        }
        let k_meas = k.mask_mul(&mask).unwrap();
        let mut trng = stream(seed, &[tag::PHANTOM]);
        let target =
            Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| trng.gen_range(0.0..1.0)).collect())
                .unwrap();

        let mut params: Vec<Parameter<f64>> = set.params().to_vec();
        let run = |ps: &[Parameter<f64>]| -> crate::Result<(Tape<f64>, NodeId)> {
            let mut tmp = ParameterSet::new();
            for (p, part) in ps.iter().zip((0..ps.len()).map(|i| set.partition(i))) {
                tmp.push(p.clone(), part)?;
            }
            let (mut tape, out) = net.forward(&tmp, &k_meas, &mask)?;
            let l = tape.l1_loss(out, &target)?;
            Ok((tape, l))
        };
        let mut grng = stream(seed, &[tag::GRAD_CHECK]);
        grad_check(
            &mut params,
            |ps| {
                let (tape, l) = run(ps)?;
                tape.value_scalar(l)
            },
            |ps| {
                for p in ps.iter_mut() {
                    p.zero_grad();
                }
                let (mut tape, l) = run(ps)?;
                tape.backward(l)?;
                let grads: Vec<(usize, Tensor<f64>)> =
                    tape.param_grads().map(|(s, g)| (s, g.clone())).collect();
                for (slot, g) in grads {
                    let dst = ps[slot].grad.data_mut();
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                }
                Ok(())
            },
            20,
            1e-5,
            &mut grng,
        )
        .unwrap()
    }

    #[test]
    fn full_pipeline_passes_gradient_check() {
        for dc in [true, false] {
            let worst = kinet_grad_check(20 + dc as u64, dc);
            assert!(worst < 1e-2, "dc={dc} worst rel error {worst}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut rng = stream(30, &[tag::INIT]);
        let (_, set): (_, ParameterSet<f32>) =
            build_kinet(&KINetSpec::default(), PartitionMode::EncoderShared, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&set, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.len(), set.len());
        for i in 0..set.len() {
            let (a, b) = (&set.params()[i], &loaded.params()[i]);
            assert_eq!(a.name, b.name);
            assert_eq!(set.partition(i), loaded.partition(i));
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
