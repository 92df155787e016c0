//! HTTP service and CLI for the voxel detailization engine.
//!
//! Routes:
//!
//! | method | path | body / query | reply |
//! |---|---|---|---|
//! | POST | `/api/detailize` | `{checkpoint_id, grid}` (grid: base64 ARTV) | `{mesh, elapsed_ms, strict_iou_vs_input, vertices, triangles}` (mesh: base64 PLY) |
//! | POST | `/api/train` | `{config, event_every?}` (flat config text) | `202 {job_id}`; 409 while a job runs |
//! | GET | `/api/jobs/{id}` | | job record |
//! | GET | `/api/jobs/{id}/events` | | SSE: `loss` events, then `done` or `failed` |
//! | GET | `/api/render` | `checkpoint, grid, azimuth, elevation, fov, radius, size` | PNG |
//! | GET | `/api/checkpoints` | | `{checkpoints: [{id, prompt, k, fine, bytes}]}` |
//!
//! Errors are `{error}` with 400 (malformed input), 404 (unknown checkpoint
//! or job), 409 (busy) or 422 (valid input the checkpoint cannot serve).

pub mod api;
pub mod cli;
pub mod jobs;
pub mod store;

pub use api::{router, AppState};
