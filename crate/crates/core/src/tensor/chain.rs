use super::graph::Param;
use super::layer::{Layer, LayerCache};
use super::{Element, Result, Tensor, TensorError};

/// An ordered list of layers. Concat-skip layers may reference the output
/// of any earlier layer in the same chain.
#[derive(Debug, Clone)]
pub struct Chain<T: Element> {
    layers: Vec<Layer<T>>,
    /// `keep[i]`: output of layer i is read by a later concat-skip.
    keep: Vec<bool>,
}

/// Activations and caches recorded by a train-mode forward.
#[derive(Debug)]
pub(crate) struct ChainTape<T: Element> {
    /// Output of each layer (the chain input is held by the caller).
    acts: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Element> ChainTape<T> {
    pub fn output(&self) -> Option<&Tensor<T>> {
        self.acts.last()
    }
}

impl<T: Element> Chain<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let mut keep = vec![false; layers.len()];
        for (i, l) in layers.iter().enumerate() {
            if let Layer::ConcatSkip { from } = l {
                if *from >= i {
                    return Err(TensorError::BadLayer(format!(
                        "concat-skip at {i} references layer {from}, which is not earlier"
                    )));
                }
                keep[*from] = true;
            }
        }
        Ok(Chain { layers, keep })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn skip_source(&self, i: usize) -> Option<usize> {
        match self.layers[i] {
            Layer::ConcatSkip { from } => Some(from),
            _ => None,
        }
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut dims: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let skip = self.skip_source(i).map(|f| &dims[f][..]);
            let next = l.output_dims(i, &cur, skip)?;
            dims.push(next.clone());
            cur = next;
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut saved: Vec<Option<Tensor<T>>> = vec![None; self.layers.len()];
        let mut cur: Option<Tensor<T>> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let input = cur.as_ref().unwrap_or(x);
            let skip = self.skip_source(i).and_then(|f| saved[f].as_ref());
            let out = l.infer(i, input, skip)?;
            if !out.is_finite() {
                return Err(TensorError::NonFinite { layer: i, kind: l.kind() });
            }
            if self.keep[i] {
                saved[i] = Some(out.clone());
            }
            cur = Some(out);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor<T>) -> Result<ChainTape<T>> {
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let skip_idx = self.skip_source(i);
            let input = if i == 0 { x } else { &acts[i - 1] };
            let skip = skip_idx.map(|f| &acts[f]);
            let layer = &mut self.layers[i];
            let (out, cache) = layer.forward_train(i, input, skip)?;
            if !out.is_finite() {
                return Err(TensorError::NonFinite { layer: i, kind: layer.kind() });
            }
            acts.push(out);
            caches.push(cache);
        }
        Ok(ChainTape { acts, caches })
    }

    /// Reverse pass; returns the gradient with respect to the chain input.
    pub(crate) fn backward(&mut self, x: &Tensor<T>, tape: ChainTape<T>, gy: Tensor<T>) -> Result<Tensor<T>> {
        let ChainTape { mut acts, caches } = tape;
        let n = self.layers.len();
        if acts.len() != n {
            return Err(TensorError::NoForwardCache);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut upstream = Some(gy);
        let mut caches = caches;
        for i in (0..n).rev() {
            let g = match (upstream.take(), grads[i].take()) {
                (Some(a), Some(b)) => add(a, &b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => Tensor::from_parts(acts[i].dims.clone(), vec![T::zero(); acts[i].len()]),
            };
            let y = acts.pop().expect("one activation per layer");
            let cache = caches.pop().expect("one cache per layer");
            let input = if i == 0 { x } else { &acts[i - 1] };
            let (gx, gskip) = self.layers[i].backward(i, input, &y, g, cache)?;
            drop(y);
            if let (Some(from), Some(gs)) = (self.skip_source(i), gskip) {
                grads[from] = Some(match grads[from].take() {
                    Some(prev) => add(prev, &gs),
                    None => gs,
                });
            }
            upstream = Some(gx);
        }
        Ok(upstream.expect("input gradient"))
    }

    pub(crate) fn kink_pattern(&self, x: &Tensor<T>, tape: &ChainTape<T>) -> u64 {
        let mut acc = 0u64;
        for (i, l) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &tape.acts[i - 1] };
            acc = acc.rotate_left(5) ^ l.kink_pattern(input, &tape.acts[i], &tape.caches[i]);
        }
        acc
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            l.visit_state(f);
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_state_mut(f);
        }
    }
}

fn add<T: Element>(mut a: Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x = *x + y);
    a
}
