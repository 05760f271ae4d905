//! One training round: every batch step runs mixer → clients → server → clients.

use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig, MixMode};
use crate::data::{generate_synthetic, load_binary, shard_round_robin, Dataset};
use crate::error::{Error, Result};
use crate::interpolation::{
    mix_labels, mixup, ownership_shares, patch_cutmix_aggregate, vanilla_cutmix_group, SmashedData,
};
use crate::mechanism::{
    clamp_passthrough, clamp_smashed, gaussianize_label, gaussianize_smashed, one_hot,
};
use crate::mixer::{
    build_patch_masks, draw_mixing_ratios, owner_map, LambdaMode, MixingRatios, PatchMask,
};
use crate::rdp::{eps_baseline, eps_cutmix_at, eps_mixup_at};
use crate::rng::{SeededRng, StreamKind};
use crate::tensor::Tensor;
use crate::vit::{
    accumulate, argmax, flatten_params, load_flat_params, loss_soft_ce, sgd_step, LowerCache,
    LowerSegment, UpperSegment, VitConfig,
};

use super::groups::{fedavg_lower, form_groups};
use super::transport::{TrafficLog, Transport};
use super::wire::{
    decode_weights, encode_weights, LabelPayload, MaskItem, MaskPayload, MessageKind, PatchPayload,
    Role, RoundMessage,
};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub lower: LowerSegment,
    /// Private upper segment, only in standalone mode.
    pub upper: Option<UpperSegment>,
    /// Indices into the training set.
    pub shard: Vec<usize>,
}

/// One metrics row per round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mode: MixMode,
    pub n: usize,
    pub g: usize,
    pub sigma_s: f64,
    pub sigma_y: f64,
    pub train_loss: f64,
    pub test_acc: f64,
    pub eps_o: f64,
    pub eps_mix: f64,
    pub eps_cutmix: f64,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
}

#[derive(Debug)]
pub struct SimulationState {
    pub config: ExperimentConfig,
    pub vit: VitConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientState>,
    /// Shared server segment (unused in standalone mode).
    pub upper: UpperSegment,
    /// Rounds completed so far.
    pub round: usize,
    /// Largest λ the mixer has handed out.
    pub max_lambda_seen: f64,
    transport: Transport,
}

/// Train and test splits for `config`.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            classes,
            train_per_client,
            test_count,
            height,
            width,
            channels,
        } => {
            let train = generate_synthetic(
                &mut SeededRng::derive(config.seed, StreamKind::Data, &[0]),
                *classes,
                train_per_client * config.num_clients,
                *height,
                *width,
                *channels,
            )?;
            let test = generate_synthetic(
                &mut SeededRng::derive(config.seed, StreamKind::Data, &[1]),
                *classes,
                *test_count,
                *height,
                *width,
                *channels,
            )?;
            Ok((train, test))
        }
        DatasetSpec::Binary {
            classes,
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_binary(train_images, train_labels, *classes)?,
            load_binary(test_images, test_labels, *classes)?,
        )),
    }
}

/// Per batch item: the ratio each member received and the group's owner map.
struct ItemPlan {
    ratios: MixingRatios,
    owners: Option<Vec<usize>>,
}

struct GroupPlan {
    members: Vec<usize>,
    items: Vec<ItemPlan>,
}

/// What a client keeps between upload and gradient receipt.
struct ClientPass {
    caches: Vec<LowerCache>,
    passthrough: Vec<Vec<bool>>,
}

/// Client view of one batch item after clamping, masking and noise.
struct Upload {
    smashed: Tensor,
    rows: Vec<usize>,
    label: Tensor,
    lambda: f64,
}

impl SimulationState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = build_datasets(&config)?;
        Self::with_data(config, train, test)
    }

    /// All clients start from the same lower-segment initialization.
    pub fn with_data(config: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.image_shape() != test.image_shape() || train.classes != test.classes {
            return Err(Error::Config("train and test sets differ in shape".into()));
        }
        if train.len() < config.num_clients {
            return Err(Error::Config(format!(
                "{} training samples for {} clients",
                train.len(),
                config.num_clients
            )));
        }
        if train.classes != config.classes() {
            return Err(Error::Config(
                "dataset class count differs from config".into(),
            ));
        }
        if config.fedavg_lower && config.mode == MixMode::StandaloneCutout {
            return Err(Error::Config("fedavg_lower needs a shared server".into()));
        }
        let (h, w, c) = train.image_shape();
        let vit = config.vit_config(h, w, c);
        vit.validate().map_err(|e| Error::Config(e.to_string()))?;
        if vit.num_patches() > u16::MAX as usize {
            return Err(Error::Config(
                "too many patches for 16-bit patch indices".into(),
            ));
        }
        let lower = LowerSegment::init(
            vit,
            &mut SeededRng::derive(config.seed, StreamKind::Init, &[0]),
        )?;
        let upper = UpperSegment::init(
            vit,
            &mut SeededRng::derive(config.seed, StreamKind::Init, &[1]),
        )?;
        let standalone = config.mode == MixMode::StandaloneCutout;
        // Labels in generated data cycle through the classes, so deal a shuffled order.
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::derive(config.seed, StreamKind::Data, &[2]).shuffle(&mut order);
        let clients = shard_round_robin(train.len(), config.num_clients)
            .into_iter()
            .map(|shard| shard.into_iter().map(|i| order[i]).collect())
            .map(|shard| ClientState {
                lower: lower.clone(),
                upper: standalone.then(|| upper.clone()),
                shard,
            })
            .collect();
        let transport = Transport::new(config.num_clients, config.mode.uses_mixer());
        Ok(Self {
            vit,
            train,
            test,
            clients,
            upper,
            round: 0,
            max_lambda_seen: 0.0,
            transport,
            config,
        })
    }

    /// Max λ used for the per-round budget columns: `1/g` under uniform
    /// ratios, the largest drawn ratio under Dirichlet ratios.
    pub fn budget_lambda(&self) -> f64 {
        match self.config.lambda_mode {
            LambdaMode::Uniform => 1.0 / self.config.group_size as f64,
            LambdaMode::Dirichlet { .. } if self.max_lambda_seen > 0.0 => self.max_lambda_seen,
            LambdaMode::Dirichlet { .. } => 1.0 / self.config.group_size as f64,
        }
    }

    fn steps_per_round(&self) -> usize {
        let longest = self
            .clients
            .iter()
            .map(|c| c.shard.len())
            .max()
            .unwrap_or(0);
        longest.div_ceil(self.config.batch_size)
    }

    /// Clamped smashed data of test image `j`, using client `j mod n`.
    pub fn test_accuracy(&self) -> Result<f64> {
        let n = self.clients.len();
        let mut correct = 0;
        for j in 0..self.test.len() {
            let client = &self.clients[j % n];
            let (pre, _) = client.lower.forward(&self.test.image(j))?;
            let s = clamp_smashed(&pre, self.config.privacy.delta_bound);
            let upper = client.upper.as_ref().unwrap_or(&self.upper);
            let (logits, _) = upper.forward(&s)?;
            correct += usize::from(argmax(logits.data()) == self.test.labels[j]);
        }
        Ok(correct as f64 / self.test.len() as f64)
    }

    fn mixer_plan(&self, rng: &mut SeededRng, groups: &[Vec<usize>]) -> Result<Vec<GroupPlan>> {
        let n_p = self.vit.num_patches();
        groups
            .iter()
            .map(|members| {
                let items = (0..self.config.batch_size)
                    .map(|_| {
                        let ratios =
                            draw_mixing_ratios(rng, members.len(), self.config.lambda_mode)?;
                        let owners = if self.config.mode.uses_masks() {
                            Some(owner_map(&build_patch_masks(rng, &ratios, n_p)?)?)
                        } else {
                            None
                        };
                        Ok(ItemPlan { ratios, owners })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GroupPlan {
                    members: members.clone(),
                    items,
                })
            })
            .collect()
    }

    fn batch_indices(&self, order: &[Vec<usize>], client: usize, step: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let shard = &order[client];
        (0..b)
            .map(|j| shard[(step * b + j) % shard.len()])
            .collect()
    }

    /// Lower forward, clamp, optional cutout and noise for one client's batch.
    fn client_forward(
        &self,
        client: usize,
        indices: &[usize],
        plan: Option<&MaskPayload>,
        step: usize,
    ) -> Result<(Vec<Upload>, ClientPass)> {
        let p = &self.config.privacy;
        let mode = self.config.mode;
        let key = [self.round as u64, step as u64, client as u64];
        let mut noise = SeededRng::derive(self.config.seed, StreamKind::SmashedNoise, &key);
        let mut label_noise = SeededRng::derive(self.config.seed, StreamKind::LabelNoise, &key);
        let n_p = self.vit.num_patches();
        let mut uploads = Vec::with_capacity(indices.len());
        let mut pass = ClientPass {
            caches: Vec::with_capacity(indices.len()),
            passthrough: Vec::with_capacity(indices.len()),
        };
        for (j, &idx) in indices.iter().enumerate() {
            let (pre, cache) = self.clients[client].lower.forward(&self.train.image(idx))?;
            let clamped = clamp_smashed(&pre, p.delta_bound);
            pass.passthrough
                .push(clamp_passthrough(&pre, p.delta_bound));
            pass.caches.push(cache);
            let mask = match (mode.uses_masks(), plan) {
                (true, Some(m)) => PatchMask::from_indices(client, n_p, m.selected(j))?,
                _ => PatchMask::full(client, n_p),
            };
            let masked = if mode.uses_masks() {
                crate::interpolation::cutout_tensor(&clamped, &mask)?
            } else {
                clamped
            };
            let (sigma_s, sigma_y) = if mode.adds_noise() {
                (p.sigma_s, p.sigma_y)
            } else {
                (0.0, 0.0)
            };
            let smashed = gaussianize_smashed(&mut noise, &masked, &mask, sigma_s)?;
            let label = gaussianize_label(
                &mut label_noise,
                &one_hot(self.train.labels[idx], self.vit.classes),
                sigma_y,
            )?;
            let lambda = plan.map_or(1.0, |m| m.items[j].lambda);
            uploads.push(Upload {
                smashed,
                rows: mask.selected,
                label,
                lambda,
            });
        }
        Ok((uploads, pass))
    }

    /// Backprop of the cut-layer gradients through clamp and lower segment; averaged over the batch.
    fn client_backward(
        &self,
        client: usize,
        pass: &ClientPass,
        grads: &[Tensor],
    ) -> Result<LowerSegment> {
        let lower = &self.clients[client].lower;
        let mut total = lower.zeros_like();
        for ((cache, through), g) in pass.caches.iter().zip(&pass.passthrough).zip(grads) {
            let mut g = g.clone();
            for (v, &keep) in g.data_mut().iter_mut().zip(through) {
                if !keep {
                    *v = 0.0;
                }
            }
            accumulate(&mut total, &lower.backward(cache, &g)?)?;
        }
        scale_params(&mut total, 1.0 / grads.len() as f64);
        Ok(total)
    }

    fn round_groups(&self) -> Result<Vec<Vec<usize>>> {
        let mut rng = SeededRng::derive(self.config.seed, StreamKind::Groups, &[self.round as u64]);
        form_groups(&mut rng, self.config.num_clients, self.config.group_size)
    }

    fn shuffled_shards(&self) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .enumerate()
            .map(|(c, st)| {
                let mut s = st.shard.clone();
                SeededRng::derive(
                    self.config.seed,
                    StreamKind::ClientShuffle,
                    &[self.round as u64, c as u64],
                )
                .shuffle(&mut s);
                s
            })
            .collect()
    }

    fn track_lambda(&mut self, plans: &[GroupPlan]) {
        for it in plans.iter().flat_map(|g| &g.items) {
            self.max_lambda_seen = self.max_lambda_seen.max(it.ratios.max());
        }
    }

    /// One step with the shared server; returns the summed item losses and item count.
    fn shared_step(
        &mut self,
        step: usize,
        groups: &[Vec<usize>],
        order: &[Vec<usize>],
    ) -> Result<(f64, usize)> {
        let mode = self.config.mode;
        let n = self.config.num_clients;
        let n_p = self.vit.num_patches();
        let round = self.round as u32;
        self.transport.begin_step(round)?;

        // Mixer: ratios and masks, one MaskDown per client.
        let singletons: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
        let groups = if mode.uses_mixer() {
            groups
        } else {
            &singletons[..]
        };
        if mode.uses_mixer() {
            let mut rng = SeededRng::derive(
                self.config.seed,
                StreamKind::Mixer,
                &[self.round as u64, step as u64],
            );
            let plans = self.mixer_plan(&mut rng, groups)?;
            self.track_lambda(&plans);
            for plan in &plans {
                for (m, &c) in plan.members.iter().enumerate() {
                    let payload = mask_payload(plan, m, n_p);
                    self.transport.send(RoundMessage {
                        kind: MessageKind::MaskDown,
                        sender: Role::Mixer,
                        receiver: Role::Client(c),
                        round,
                        payload: payload.encode(),
                    })?;
                }
            }
        }

        // Clients: forward and upload.
        let mut passes = Vec::with_capacity(n);
        for c in 0..n {
            let plan = if mode.uses_mixer() {
                let msg =
                    self.transport
                        .recv(Role::Client(c), Role::Mixer, MessageKind::MaskDown)?;
                Some(MaskPayload::decode(&msg.payload)?)
            } else {
                None
            };
            let indices = self.batch_indices(order, c, step);
            let (uploads, pass) = self.client_forward(c, &indices, plan.as_ref(), step)?;
            let tensors: Vec<Tensor> = uploads.iter().map(|u| u.smashed.clone()).collect();
            let rows: Vec<Vec<usize>> = uploads.iter().map(|u| u.rows.clone()).collect();
            let labels = LabelPayload {
                items: uploads.into_iter().map(|u| (u.lambda, u.label)).collect(),
            };
            self.transport.send(RoundMessage {
                kind: MessageKind::SmashedUp,
                sender: Role::Client(c),
                receiver: Role::Server,
                round,
                payload: PatchPayload::from_rows(&tensors, &rows).encode(),
            })?;
            self.transport.send(RoundMessage {
                kind: MessageKind::LabelUp,
                sender: Role::Client(c),
                receiver: Role::Server,
                round,
                payload: labels.encode(),
            })?;
            passes.push(pass);
        }

        // Server: mix per group and item, train the upper segment.
        let mut smashed = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for c in 0..n {
            let s = self
                .transport
                .recv(Role::Server, Role::Client(c), MessageKind::SmashedUp)?;
            smashed.push(PatchPayload::decode(&s.payload)?);
            let l = self
                .transport
                .recv(Role::Server, Role::Client(c), MessageKind::LabelUp)?;
            labels.push(LabelPayload::decode(&l.payload)?);
        }
        let b = self.config.batch_size;
        let mut box_rng = SeededRng::derive(
            self.config.seed,
            StreamKind::ServerBox,
            &[self.round as u64, step as u64],
        );
        let mut upper_grad = self.upper.zeros_like();
        let mut cut_grads: Vec<Vec<(Tensor, Vec<usize>)>> = vec![Vec::with_capacity(b); n];
        let mut loss_sum = 0.0;
        let mut items = 0;
        for members in groups {
            for j in 0..b {
                let inputs: Vec<SmashedData> = members
                    .iter()
                    .map(|&c| SmashedData::new(smashed[c].to_dense(j, n_p)?, c))
                    .collect::<Result<_>>()?;
                let ys: Vec<(Tensor, f64)> = members
                    .iter()
                    .map(|&c| {
                        let (l, y) = &labels[c].items[j];
                        (y.clone(), *l)
                    })
                    .collect();
                let (x, target, routes) =
                    server_mix(mode, members, &inputs, &ys, &smashed, j, &mut box_rng)?;
                let (logits, cache) = self.upper.forward(&x)?;
                let (loss, dlogits) = loss_soft_ce(&logits, &target)?;
                let (g, dx) = self.upper.backward(&cache, &dlogits)?;
                accumulate(&mut upper_grad, &g)?;
                loss_sum += loss;
                items += 1;
                for (m, &c) in members.iter().enumerate() {
                    let (scale, rows) = &routes[m];
                    let mut gm = Tensor::zeros(dx.shape());
                    for &k in rows {
                        for (o, v) in gm.row_mut(k).iter_mut().zip(dx.row(k)) {
                            *o = scale * v;
                        }
                    }
                    cut_grads[c].push((gm, rows.clone()));
                }
            }
        }
        scale_params(&mut upper_grad, 1.0 / items as f64);
        sgd_step(&mut self.upper, &upper_grad, self.config.learning_rate)?;
        for (c, grads) in cut_grads.iter().enumerate() {
            let tensors: Vec<Tensor> = grads.iter().map(|(t, _)| t.clone()).collect();
            let rows: Vec<Vec<usize>> = grads.iter().map(|(_, r)| r.clone()).collect();
            self.transport.send(RoundMessage {
                kind: MessageKind::CutGradDown,
                sender: Role::Server,
                receiver: Role::Client(c),
                round,
                payload: PatchPayload::from_rows(&tensors, &rows).encode(),
            })?;
        }

        // Clients: backprop into the lower segments.
        for (c, pass) in passes.iter().enumerate() {
            let msg =
                self.transport
                    .recv(Role::Client(c), Role::Server, MessageKind::CutGradDown)?;
            let payload = PatchPayload::decode(&msg.payload)?;
            let grads = (0..b)
                .map(|j| payload.to_dense(j, n_p))
                .collect::<Result<Vec<_>>>()?;
            let g = self.client_backward(c, pass, &grads)?;
            sgd_step(&mut self.clients[c].lower, &g, self.config.learning_rate)?;
        }

        if self.config.fedavg_lower {
            self.average_lowers(round)?;
        }
        Ok((loss_sum, items))
    }

    fn average_lowers(&mut self, round: u32) -> Result<()> {
        let n = self.config.num_clients;
        for c in 0..n {
            self.transport.send(RoundMessage {
                kind: MessageKind::LowerWeightsUp,
                sender: Role::Client(c),
                receiver: Role::Server,
                round,
                payload: encode_weights(&flatten_params(&self.clients[c].lower)),
            })?;
        }
        let mut segments = Vec::with_capacity(n);
        for c in 0..n {
            let msg =
                self.transport
                    .recv(Role::Server, Role::Client(c), MessageKind::LowerWeightsUp)?;
            let mut seg = self.clients[c].lower.clone();
            load_flat_params(&mut seg, &decode_weights(&msg.payload)?)?;
            segments.push(seg);
        }
        let avg = flatten_params(&fedavg_lower(&segments)?);
        for c in 0..n {
            self.transport.send(RoundMessage {
                kind: MessageKind::AvgWeightsDown,
                sender: Role::Server,
                receiver: Role::Client(c),
                round,
                payload: encode_weights(&avg),
            })?;
        }
        for c in 0..n {
            let msg =
                self.transport
                    .recv(Role::Client(c), Role::Server, MessageKind::AvgWeightsDown)?;
            load_flat_params(&mut self.clients[c].lower, &decode_weights(&msg.payload)?)?;
        }
        Ok(())
    }

    /// Standalone: each client trains its own full model on Cutout smashed data.
    fn standalone_step(
        &mut self,
        step: usize,
        groups: &[Vec<usize>],
        order: &[Vec<usize>],
    ) -> Result<(f64, usize)> {
        let n_p = self.vit.num_patches();
        let mut rng = SeededRng::derive(
            self.config.seed,
            StreamKind::Mixer,
            &[self.round as u64, step as u64],
        );
        let plans = self.mixer_plan(&mut rng, groups)?;
        self.track_lambda(&plans);
        let mut local_plan = vec![None; self.config.num_clients];
        for plan in &plans {
            for (m, &c) in plan.members.iter().enumerate() {
                local_plan[c] = Some(mask_payload(plan, m, n_p));
            }
        }
        let mut loss_sum = 0.0;
        let mut items = 0;
        for c in 0..self.config.num_clients {
            let indices = self.batch_indices(order, c, step);
            let (uploads, pass) = self.client_forward(c, &indices, local_plan[c].as_ref(), step)?;
            let upper = self.clients[c]
                .upper
                .as_ref()
                .expect("standalone clients own an upper segment");
            let mut upper_grad = upper.zeros_like();
            let mut grads = Vec::with_capacity(uploads.len());
            for u in &uploads {
                let (logits, cache) = upper.forward(&u.smashed)?;
                let (loss, dlogits) = loss_soft_ce(&logits, &u.label)?;
                let (g, dx) = upper.backward(&cache, &dlogits)?;
                accumulate(&mut upper_grad, &g)?;
                loss_sum += loss;
                items += 1;
                grads.push(crate::interpolation::cutout_tensor(
                    &dx,
                    &PatchMask::from_indices(c, n_p, u.rows.clone())?,
                )?);
            }
            scale_params(&mut upper_grad, 1.0 / uploads.len() as f64);
            let lower_grad = self.client_backward(c, &pass, &grads)?;
            let lr = self.config.learning_rate;
            let st = &mut self.clients[c];
            sgd_step(st.upper.as_mut().expect("present"), &upper_grad, lr)?;
            sgd_step(&mut st.lower, &lower_grad, lr)?;
        }
        Ok((loss_sum, items))
    }
}

fn scale_params<P: crate::vit::Parameters>(p: &mut P, k: f64) {
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v *= k;
        }
    }
}

fn mask_payload(plan: &GroupPlan, member: usize, num_patches: usize) -> MaskPayload {
    let masked = plan.items.iter().any(|it| it.owners.is_some());
    MaskPayload {
        member: member as u8,
        group_size: plan.members.len() as u8,
        num_patches: if masked { num_patches as u32 } else { 0 },
        items: plan
            .items
            .iter()
            .map(|it| MaskItem {
                lambda: it.ratios.as_slice()[member],
                owners: it
                    .owners
                    .as_ref()
                    .map(|o| o.iter().map(|&x| x as u8).collect())
                    .unwrap_or_default(),
            })
            .collect(),
    }
}

/// `(gradient scale, patch rows)` routed back to each group member.
type Routes = Vec<(f64, Vec<usize>)>;

/// Builds the server's training input and target for one group item.
fn server_mix(
    mode: MixMode,
    members: &[usize],
    inputs: &[SmashedData],
    ys: &[(Tensor, f64)],
    uploads: &[PatchPayload],
    j: usize,
    box_rng: &mut SeededRng,
) -> Result<(Tensor, Tensor, Routes)> {
    let n_p = inputs[0].num_patches();
    let all: Vec<usize> = (0..n_p).collect();
    let with_lambda: Vec<(SmashedData, f64)> = inputs
        .iter()
        .cloned()
        .zip(ys.iter().map(|(_, l)| *l))
        .collect();
    Ok(match mode {
        MixMode::PlainSl | MixMode::DpSl => {
            (inputs[0].patches.clone(), ys[0].0.clone(), vec![(1.0, all)])
        }
        MixMode::DpMixsl => {
            let x = mixup(&with_lambda)?;
            let routes = ys.iter().map(|(_, l)| (*l, all.clone())).collect();
            (x.patches, mix_labels(ys)?, routes)
        }
        MixMode::DpCutmixsl => {
            let masked: Vec<(SmashedData, PatchMask)> = members
                .iter()
                .zip(inputs)
                .map(|(&c, s)| {
                    Ok((
                        s.clone(),
                        PatchMask::from_indices(c, n_p, uploads[c].indices(j))?,
                    ))
                })
                .collect::<Result<_>>()?;
            let x = patch_cutmix_aggregate(&masked)?;
            let routes = masked.into_iter().map(|(_, m)| (1.0, m.selected)).collect();
            (x.patches, mix_labels(ys)?, routes)
        }
        MixMode::VanillaCutmix => {
            let refs: Vec<&SmashedData> = inputs.iter().collect();
            let lambdas: Vec<f64> = ys.iter().map(|(_, l)| *l).collect();
            let (x, owner) = vanilla_cutmix_group(&refs, &lambdas, box_rng)?;
            let shares = ownership_shares(&owner, members.len());
            let target = mix_labels(
                &ys.iter()
                    .zip(&shares)
                    .map(|((y, _), &s)| (y.clone(), s))
                    .collect::<Vec<_>>(),
            )?;
            let routes = (0..members.len())
                .map(|m| (1.0, (0..n_p).filter(|&k| owner[k] == m).collect()))
                .collect();
            (x.patches, target, routes)
        }
        MixMode::StandaloneCutout => {
            return Err(Error::State("standalone mode has no shared server".into()));
        }
    })
}

/// Runs one full round (an epoch over every client's shard) and evaluates.
pub fn run_round(state: &mut SimulationState) -> Result<(RoundMetrics, TrafficLog)> {
    let groups = state.round_groups()?;
    let order = state.shuffled_shards();
    let mut loss_sum = 0.0;
    let mut items = 0;
    for step in 0..state.steps_per_round() {
        let (l, k) = if state.config.mode == MixMode::StandaloneCutout {
            state.standalone_step(step, &groups, &order)?
        } else {
            state.shared_step(step, &groups, &order)?
        };
        loss_sum += l;
        items += k;
    }
    let log = state.transport.take_log();
    let totals = log.totals();
    let test_acc = state.test_accuracy()?;
    let p = state.config.privacy;
    let m = state.budget_lambda();
    let metrics = RoundMetrics {
        round: state.round,
        mode: state.config.mode,
        n: state.config.num_clients,
        g: state.config.group_size,
        sigma_s: p.sigma_s,
        sigma_y: p.sigma_y,
        train_loss: loss_sum / items.max(1) as f64,
        test_acc,
        eps_o: eps_baseline(&p),
        eps_mix: eps_mixup_at(&p, m),
        eps_cutmix: eps_cutmix_at(&p, m),
        uplink_bytes: totals.uplink,
        downlink_bytes: totals.downlink,
    };
    if !metrics.train_loss.is_finite() {
        return Err(Error::Invariant(format!(
            "training loss diverged in round {}",
            state.round
        )));
    }
    state.round += 1;
    Ok((metrics, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSpec;
    use crate::protocol::comm::comm_report;

    fn tiny(mode: MixMode, n: usize, g: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            mode,
            num_clients: n,
            group_size: g,
            epochs: 2,
            dataset: DatasetSpec::Synthetic {
                classes: 2,
                train_per_client: 4,
                test_count: 4,
                height: 8,
                width: 8,
                channels: 1,
            },
            model: ModelSpec {
                patch_size: 2,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            batch_size: 2,
            ..ExperimentConfig::default()
        };
        cfg.privacy.sigma_s = 0.0;
        cfg.privacy.sigma_y = 0.0;
        cfg
    }

    fn trajectory(cfg: ExperimentConfig, rounds: usize) -> Vec<Vec<f64>> {
        let mut st = SimulationState::new(cfg).unwrap();
        (0..rounds)
            .map(|_| {
                run_round(&mut st).unwrap();
                let upper = st.clients[0].upper.as_ref().unwrap_or(&st.upper);
                let mut p = flatten_params(&st.clients[0].lower);
                p.extend(flatten_params(upper));
                p
            })
            .collect()
    }

    #[test]
    fn single_client_modes_match_plain() {
        let plain = trajectory(tiny(MixMode::PlainSl, 1, 1), 3);
        for mode in MixMode::ALL {
            assert_eq!(trajectory(tiny(mode, 1, 1), 3), plain, "{mode}");
        }
    }

    #[test]
    fn training_changes_parameters() {
        let t = trajectory(tiny(MixMode::DpCutmixsl, 4, 2), 2);
        assert_ne!(t[0], t[1]);
    }

    #[test]
    fn traffic_splits_into_links() {
        let mut st = SimulationState::new(tiny(MixMode::DpCutmixsl, 4, 2)).unwrap();
        let (m, log) = run_round(&mut st).unwrap();
        let totals = log.totals();
        assert_eq!(totals.uplink + totals.downlink, log.total_payload_bytes());
        assert_eq!(
            (m.uplink_bytes, m.downlink_bytes),
            (totals.uplink, totals.downlink)
        );
        // mask + gradient per client per step down; smashed + labels up.
        let steps = st.steps_per_round();
        assert_eq!(log.entries().len(), 4 * 4 * steps);
    }

    #[test]
    fn fedavg_keeps_lowers_equal() {
        let mut cfg = tiny(MixMode::DpMixsl, 3, 3);
        cfg.fedavg_lower = true;
        let mut st = SimulationState::new(cfg).unwrap();
        let (_, log) = run_round(&mut st).unwrap();
        assert!(st.clients.iter().all(|c| c.lower == st.clients[0].lower));
        assert!(log
            .entries()
            .iter()
            .any(|e| e.kind == MessageKind::AvgWeightsDown));
    }

    #[test]
    fn sparse_uplink_shrinks_with_group() {
        let mut st = SimulationState::new(tiny(MixMode::DpCutmixsl, 4, 1)).unwrap();
        let (_, log) = run_round(&mut st).unwrap();
        let n_p = st.vit.num_patches();
        let r = comm_report(&log, 4, 2, n_p, st.vit.embed_dim);
        assert_eq!(r.reduction_factor, 1.0);

        let mut st = SimulationState::new(tiny(MixMode::DpCutmixsl, 4, 4)).unwrap();
        let (_, log) = run_round(&mut st).unwrap();
        let r = comm_report(&log, 4, 2, n_p, st.vit.embed_dim);
        assert!(
            r.reduction_factor > 3.5 && r.reduction_factor < 4.5,
            "{}",
            r.reduction_factor
        );
    }

    #[test]
    fn standalone_sends_nothing() {
        let mut st = SimulationState::new(tiny(MixMode::StandaloneCutout, 2, 2)).unwrap();
        let (m, log) = run_round(&mut st).unwrap();
        assert!(log.entries().is_empty());
        assert_eq!(m.uplink_bytes, 0);
    }

    #[test]
    fn rejects_bad_setups() {
        let mut cfg = tiny(MixMode::StandaloneCutout, 2, 2);
        cfg.fedavg_lower = true;
        assert!(matches!(SimulationState::new(cfg), Err(Error::Config(_))));
        let cfg = tiny(MixMode::PlainSl, 2, 3);
        assert!(matches!(SimulationState::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dirichlet_budget_tracks_draws() {
        let mut cfg = tiny(MixMode::DpCutmixsl, 4, 2);
        cfg.lambda_mode = LambdaMode::Dirichlet { concentration: 1.0 };
        let mut st = SimulationState::new(cfg).unwrap();
        assert_eq!(st.budget_lambda(), 0.5);
        run_round(&mut st).unwrap();
        assert!(st.budget_lambda() >= 0.5 && st.budget_lambda() <= 1.0);
    }
}
