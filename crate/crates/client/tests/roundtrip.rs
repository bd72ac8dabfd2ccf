use std::net::SocketAddr;

use iguide_client::{Client, ClientError};
use iguide_core::api::{DatasetLocation, EvalRequest, NormalizeRequest, OverlayRequest, RunRequest, SynthRequest};
use iguide_core::eval::evaluate;
use iguide_core::fusion::{normalize_frame, CorrespondenceUncertainty};
use iguide_core::geometry::Pixel;
use iguide_core::io;
use iguide_core::pipeline::{run_estimate, Dataset, DatasetPaths, RunConfig, TRUTH_FILE};

async fn client() -> Client {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let (local, _) = iguide_service::spawn(addr).await.unwrap();
    Client::new(format!("http://{local}/"))
}

fn synth_request(dir: &std::path::Path, name: &str, seed: u64) -> SynthRequest {
    SynthRequest {
        scenario: name.into(),
        seed,
        out_dir: dir.to_path_buf(),
        gravity: RunConfig::default().gravity,
    }
}

#[tokio::test]
async fn run_through_service_equals_library() {
    let c = client().await;
    assert_eq!(c.health().await.unwrap().status, "ok");
    let dir = tempfile::tempdir().unwrap();
    let summary = c
        .synth(&synth_request(dir.path(), "pure-translation", 21))
        .await
        .unwrap();
    assert_eq!(summary.frames, 3);

    let config = RunConfig {
        seed: 21,
        ..RunConfig::default()
    };
    let remote = c
        .run(&RunRequest {
            dataset: DatasetLocation::Dir {
                dir: dir.path().to_path_buf(),
            },
            config,
        })
        .await
        .unwrap();
    let local = run_estimate(&Dataset::load(&DatasetPaths::in_dir(dir.path())).unwrap(), &config).unwrap();
    assert_eq!(remote, local);
    assert_eq!(
        io::format_results_csv(&remote.rows),
        io::format_results_csv(&local.rows)
    );

    let truth = io::parse_truth(&io::read_text(&dir.path().join(TRUTH_FILE)).unwrap(), "truth").unwrap();
    let metrics = c
        .eval(&EvalRequest {
            results: remote.rows.clone(),
            truth: truth.clone(),
            visual: None,
        })
        .await
        .unwrap();
    assert_eq!(metrics, evaluate(&remote.rows, &truth, None).unwrap());
    assert_eq!(metrics.matched, remote.rows.len());

    let image = io::read_pgm(&dir.path().join("images/frame_0001.pgm")).unwrap();
    let rows: Vec<_> = remote.rows.iter().filter(|r| r.frame == 1).cloned().collect();
    let svg = c
        .overlay(&OverlayRequest {
            image,
            rows: rows.clone(),
        })
        .await
        .unwrap();
    assert_eq!(svg.matches("class=\"track\"").count(), rows.len());
}

#[tokio::test]
async fn synth_is_reproducible() {
    let c = client().await;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = c.synth(&synth_request(a.path(), "blurred-edge", 4)).await.unwrap();
    let sb = c.synth(&synth_request(b.path(), "blurred-edge", 4)).await.unwrap();
    assert_eq!(sa, sb);
    for file in &sa.files {
        assert_eq!(
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[tokio::test]
async fn service_errors_are_typed() {
    let c = client().await;
    let dir = tempfile::tempdir().unwrap();
    match c.synth(&synth_request(dir.path(), "haze", 1)).await {
        Err(ClientError::Service { status, kind, message }) => {
            assert_eq!(status, 400);
            assert_eq!(kind, "input");
            assert!(
                message.contains("pure-translation, blurred-edge, rotation"),
                "{message}"
            );
        }
        other => panic!("unexpected {other:?}"),
    }
    match c.track(99).await {
        Err(ClientError::Service { status: 404, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    match c.delete_track(99).await {
        Err(ClientError::Service { status: 404, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let err = c
        .eval(&EvalRequest {
            results: vec![],
            truth: vec![],
            visual: None,
        })
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::Service { status: 400, .. }), "{err:?}");
}

#[tokio::test]
async fn normalize_through_service() {
    let c = client().await;
    let batch: Vec<CorrespondenceUncertainty> = [1.0, 4.0, 0.25]
        .iter()
        .map(|&v| CorrespondenceUncertainty::fallback(Pixel::new(3.0, 4.0), v))
        .collect();
    let req = NormalizeRequest {
        uncertainties: batch.clone(),
        target_det: 2.0,
    };
    assert_eq!(c.normalize(&req).await.unwrap(), normalize_frame(&batch, 2.0).unwrap());
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let c = Client::new(format!("http://{addr}"));
    assert!(matches!(c.health().await, Err(ClientError::Transport(_))));
}
