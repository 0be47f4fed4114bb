//! The full network: one shared backbone and any number of independent
//! task heads.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::backbone::{self, Backbone, BackboneConfig, ScalePyramid};
use crate::error::{Error, Result};
use crate::heads::{self, head_param_count, HeadOptions, HeadOutput, TaskHead, TaskSpec};
use crate::layers::{Forward, Initializer};

pub struct Medusa {
    store: ParamStore,
    init: Initializer,
    seed: u64,
    backbone: Backbone,
    heads: Vec<TaskHead>,
}

impl Medusa {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let init = Initializer::new(seed);
        let backbone = Backbone::new(&mut store, &init, config)?;
        Ok(Self {
            store,
            init,
            seed,
            backbone,
            heads: Vec::new(),
        })
    }

    /// Attaches a freshly initialized head for `spec`.
    pub fn add_head(&mut self, spec: TaskSpec, options: HeadOptions) -> Result<()> {
        if self.head(&spec.name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "a head named {} already exists",
                spec.name
            )));
        }
        let head = TaskHead::new(&mut self.store, &self.init, self.backbone.config(), spec, options)?;
        self.heads.push(head);
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn head(&self, name: &str) -> Option<&TaskHead> {
        self.heads.iter().find(|h| h.name() == name)
    }

    pub fn task_names(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.name().to_string()).collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Backbone features of an N×3×H×W batch.
    pub fn extract_features(&mut self, tape: &mut Tape, images: Var, training: bool) -> Result<ScalePyramid> {
        let mut fw = Forward::new(tape, &mut self.store, training);
        self.backbone.extract_features(&mut fw, images)
    }

    /// Runs the named heads (all heads when `tasks` is `None`) on an
    /// already-computed pyramid, in the order given.
    pub fn forward_heads(
        &mut self,
        tape: &mut Tape,
        pyramid: &ScalePyramid,
        tasks: Option<&[String]>,
        training: bool,
    ) -> Result<Vec<(String, HeadOutput)>> {
        let selected: Vec<&TaskHead> = match tasks {
            None => self.heads.iter().collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    self.heads
                        .iter()
                        .find(|h| h.name() == n)
                        .ok_or_else(|| Error::InvalidArgument(format!("no head named {n}")))
                })
                .collect::<Result<_>>()?,
        };
        let mut fw = Forward::new(tape, &mut self.store, training);
        selected
            .into_iter()
            .map(|h| Ok((h.name().to_string(), h.forward(&mut fw, pyramid)?)))
            .collect()
    }

    /// Backbone plus heads on an image batch.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        images: &Tensor,
        tasks: Option<&[String]>,
        training: bool,
    ) -> Result<Vec<(String, HeadOutput)>> {
        let x = tape.constant(images.clone());
        let pyramid = self.extract_features(tape, x, training)?;
        self.forward_heads(tape, &pyramid, tasks, training)
    }

    /// Freezes the backbone and every head attached so far.
    pub fn freeze_backbone(&mut self) {
        self.store.freeze_prefix(backbone::PREFIX);
        self.store.freeze_prefix(heads::PREFIX);
    }

    pub fn backbone_frozen(&self) -> bool {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(backbone::PREFIX))
            .all(|(_, p)| p.frozen)
    }

    /// Learnable scalars of the whole model.
    pub fn param_count(&self) -> usize {
        self.store.num_learnable("")
    }

    /// Closed-form count of the same quantity.
    pub fn expected_param_count(&self) -> usize {
        let cfg = self.backbone.config();
        cfg.param_count()
            + self
                .heads
                .iter()
                .map(|h| head_param_count(cfg, h.spec(), h.options()))
                .sum::<usize>()
    }
}
