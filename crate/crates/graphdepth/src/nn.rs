//! Small layer helpers shared by the depth and pose networks: convolutions
//! with registered parameters, per-channel normalization, and residual
//! blocks.

use crate::autodiff::Var;
use crate::params::{Binder, ParamInit, ParamStore};

/// 2-D convolution layer; parameters are registered at construction under
/// `<name>.w` / `<name>.b`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let name = name.into();
        let fan_in = cin * k * k;
        store.insert(format!("{name}.w"), init.he(&[cout, cin, k, k], fan_in));
        store.insert(format!("{name}.b"), init.zeros(&[cout]));
        Conv2d { name, stride, pad }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        let w = b.var(&format!("{}.w", self.name));
        let bias = b.var(&format!("{}.b", self.name));
        x.conv2d(&w, Some(&bias), self.stride, self.pad)
    }
}

/// Per-channel normalization over the spatial extent with learnable affine
/// parameters, computed from each sample's own statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    name: String,
}

impl Norm {
    pub fn new(store: &mut ParamStore, init: &mut ParamInit, name: impl Into<String>, c: usize) -> Self {
        let name = name.into();
        store.insert(format!("{name}.gamma"), init.ones(&[c]));
        store.insert(format!("{name}.beta"), init.zeros(&[c]));
        Norm { name }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        let gamma = b.var(&format!("{}.gamma", self.name));
        let beta = b.var(&format!("{}.beta", self.name));
        x.instance_norm(&gamma, &beta, 1e-5)
    }
}

/// Bottleneck residual block (1x1 reduce, 3x3, 1x1 expand), with a projection
/// shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
    conv3: Conv2d,
    norm3: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl Bottleneck {
    pub fn new(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, init, format!("{name}.conv1"), cin, mid, 1, 1, 0);
        let norm1 = Norm::new(store, init, format!("{name}.norm1"), mid);
        let conv2 = Conv2d::new(store, init, format!("{name}.conv2"), mid, mid, 3, stride, 1);
        let norm2 = Norm::new(store, init, format!("{name}.norm2"), mid);
        let conv3 = Conv2d::new(store, init, format!("{name}.conv3"), mid, cout, 1, 1, 0);
        let norm3 = Norm::new(store, init, format!("{name}.norm3"), cout);
        let shortcut = if stride != 1 || cin != cout {
            let c = Conv2d::new(store, init, format!("{name}.short"), cin, cout, 1, stride, 0);
            let n = Norm::new(store, init, format!("{name}.short_norm"), cout);
            Some((c, n))
        } else {
            None
        };
        Bottleneck { conv1, norm1, conv2, norm2, conv3, norm3, shortcut }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        let mut h = self.norm1.forward(b, &self.conv1.forward(b, x)).relu();
        h = self.norm2.forward(b, &self.conv2.forward(b, &h)).relu();
        h = self.norm3.forward(b, &self.conv3.forward(b, &h));
        let skip = match &self.shortcut {
            Some((c, n)) => n.forward(b, &c.forward(b, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

/// Basic residual block (two 3x3 convolutions).
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl BasicBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, init, format!("{name}.conv1"), cin, cout, 3, stride, 1);
        let norm1 = Norm::new(store, init, format!("{name}.norm1"), cout);
        let conv2 = Conv2d::new(store, init, format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let norm2 = Norm::new(store, init, format!("{name}.norm2"), cout);
        let shortcut = if stride != 1 || cin != cout {
            let c = Conv2d::new(store, init, format!("{name}.short"), cin, cout, 1, stride, 0);
            let n = Norm::new(store, init, format!("{name}.short_norm"), cout);
            Some((c, n))
        } else {
            None
        };
        BasicBlock { conv1, norm1, conv2, norm2, shortcut }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        let mut h = self.norm1.forward(b, &self.conv1.forward(b, x)).relu();
        h = self.norm2.forward(b, &self.conv2.forward(b, &h));
        let skip = match &self.shortcut {
            Some((c, n)) => n.forward(b, &c.forward(b, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}
