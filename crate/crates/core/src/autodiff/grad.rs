use super::element::Element;
use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl<T: Element> Tape<T> {
    /// Reverse sweep from the scalar `loss` to each of `wrt`.
    ///
    /// With `create_graph` the sweep is itself recorded, so the returned
    /// gradients can be differentiated again. Otherwise they are constants.
    /// Inputs the loss does not reach get zero gradients.
    pub fn gradients<'t>(
        &'t self,
        loss: &Var<'t, T>,
        wrt: &[Var<'t, T>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t, T>>> {
        if loss.numel() != 1 {
            return Err(Error::Structure(format!(
                "gradients: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let last = loss.id;
        let mut relevant = vec![false; last + 1];
        for w in wrt {
            if w.id <= last && w.is_tracked() {
                relevant[w.id] = true;
            }
        }
        for id in 0..=last {
            if relevant[id] {
                continue;
            }
            let (_, inputs, tracked) = self.node_meta(id);
            relevant[id] = tracked && inputs.iter().any(|&i| relevant[i]);
        }

        let prev = self.set_recording(create_graph, create_graph);
        let result = self.sweep(loss, &relevant);
        self.set_recording(prev.0, prev.1);
        let grads = result?;

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(id) => Var { tape: self, id },
                None => self.constant(&Tensor::zeros(&w.shape())),
            })
            .collect())
    }

    fn sweep<'t>(&'t self, loss: &Var<'t, T>, relevant: &[bool]) -> Result<Vec<Option<usize>>> {
        let last = loss.id;
        let mut grads: Vec<Option<usize>> = vec![None; last + 1];
        if !relevant[last] {
            return Ok(grads);
        }
        grads[last] = Some(self.constant(&Tensor::full(&loss.shape(), T::one())).id);
        for id in (0..=last).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let (op, inputs, _) = self.node_meta(id);
            if inputs.is_empty() {
                continue;
            }
            let g = Var { tape: self, id: g };
            let node = Var { tape: self, id };
            let contribs = backward(op, node, &inputs, g, relevant)?;
            for (&input, contrib) in inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                grads[input] = Some(match grads[input] {
                    Some(prev) => {
                        Var {
                            tape: self,
                            id: prev,
                        }
                        .add(&c)?
                        .id
                    }
                    None => c.id,
                });
            }
        }
        Ok(grads)
    }
}

/// Vector-Jacobian products of one node, one entry per input (`None`
/// where the input does not lead to any requested leaf).
fn backward<'t, T: Element>(
    op: Op,
    node: Var<'t, T>,
    inputs: &[usize],
    g: Var<'t, T>,
    relevant: &[bool],
) -> Result<Vec<Option<Var<'t, T>>>> {
    let tape = node.tape;
    let input = |k: usize| Var {
        tape,
        id: inputs[k],
    };
    let need = |k: usize| relevant[inputs[k]];
    let mut out: Vec<Option<Var<'t, T>>> = vec![None; inputs.len()];
    macro_rules! set {
        ($k:expr, $e:expr) => {
            if need($k) {
                out[$k] = Some($e);
            }
        };
    }
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Add => {
            set!(0, g);
            set!(1, g);
        }
        Op::Sub => {
            set!(0, g);
            set!(1, g.neg());
        }
        Op::Mul => {
            set!(0, g.mul(&input(1))?);
            set!(1, g.mul(&input(0))?);
        }
        Op::Scale(c) => set!(0, g.scale(c)),
        Op::AddScalar(_) => set!(0, g),
        Op::ScaleBy => {
            let (x, s) = (input(0), input(1));
            set!(0, g.scale_by(&s)?);
            set!(1, g.mul(&x)?.sum().reshape(&s.shape())?);
        }
        Op::Relu => {
            let x = input(0);
            // piecewise-linear: the mask is locally constant
            let mask = x
                .value()
                .map(|v| if v > T::zero() { T::one() } else { T::zero() });
            set!(0, g.mul(&tape.constant(&mask))?);
        }
        Op::Rsqrt => {
            let y = node;
            let y3 = y.mul(&y)?.mul(&y)?;
            set!(0, g.mul(&y3.scale(-0.5))?);
        }
        Op::Reshape => set!(0, g.reshape(&input(0).shape())?),
        Op::SumAll => set!(0, g.expand_scalar(&input(0).shape())?),
        Op::ExpandScalar => set!(0, g.sum().reshape(&input(0).shape())?),
        Op::SumChannels => set!(0, g.expand_channels(&input(0).shape())?),
        Op::ExpandChannels => set!(0, g.sum_channels()?),
        Op::SumRows => set!(0, g.expand_rows(input(0).shape()[1])?),
        Op::ExpandRows => set!(0, g.sum_rows()?),
        Op::Matmul { ta, tb } => {
            let (a, b) = (input(0), input(1));
            if need(0) {
                out[0] = Some(if ta {
                    b.matmul_t(&g, tb, true)?
                } else {
                    g.matmul_t(&b, false, !tb)?
                });
            }
            if need(1) {
                out[1] = Some(if tb {
                    g.matmul_t(&a, true, ta)?
                } else {
                    a.matmul_t(&g, !ta, false)?
                });
            }
        }
        Op::Conv2d(geom) => {
            let (x, w) = (input(0), input(1));
            set!(0, g.conv2d_input_grad(&w, &x.shape(), geom)?);
            set!(1, x.conv2d_weight_grad(&g, &w.shape(), geom)?);
        }
        Op::Conv2dInputGrad(geom) => {
            // node = dx(gy, w); upstream g has the shape of x
            let (gy, w) = (input(0), input(1));
            set!(0, g.conv2d(&w, geom.stride, geom.pad)?);
            set!(1, g.conv2d_weight_grad(&gy, &w.shape(), geom)?);
        }
        Op::Conv2dWeightGrad(geom) => {
            // node = dw(x, gy); upstream g has the shape of w
            let (x, gy) = (input(0), input(1));
            set!(0, gy.conv2d_input_grad(&g, &x.shape(), geom)?);
            set!(1, x.conv2d(&g, geom.stride, geom.pad)?);
        }
        Op::Softmax => {
            let y = node;
            let k = y.shape()[1];
            let inner = g.mul(&y)?.sum_rows()?.expand_rows(k)?;
            set!(0, y.mul(&g.sub(&inner)?)?);
        }
        Op::LogSumExp => {
            let x = input(0);
            let k = x.shape()[1];
            set!(0, g.expand_rows(k)?.mul(&x.softmax()?)?);
        }
    }
    Ok(out)
}
