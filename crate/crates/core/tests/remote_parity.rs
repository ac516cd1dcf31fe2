//! The engine against the reference model served over the classify
//! protocol, compared with the same model in process.

use std::sync::Arc;
use std::thread;

use rlab_core::engine::{run_episode, AttackContext, EngineConfig, RandomPolicy};
use rlab_core::filters::{FilterBank, FilterSpec};
use rlab_core::fixture::desk_fixture;
use rlab_core::image::ImageTensor;
use rlab_core::sensitivity::AttackGoal;
use rlab_core::target::{
    top_label, Backend, ClassifierHandle, ClassifyRequest, ClassifyResponse, ModelInfo,
    ReferenceModel, RemoteClassifier, RemoteOptions, TargetError,
};
use tiny_http::{Header, Method, Response, Server};

const SERVER_MAX_BATCH: usize = 16;

/// Minimal classify server around an in-process model.
fn serve(model: ReferenceModel) -> String {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let model = Arc::new(model);
    thread::spawn(move || {
        let (c, h, w) = model.input_shape();
        let info = ModelInfo {
            model_id: "desk-mlp".into(),
            num_classes: model.num_classes(),
            input_shape: [c, h, w],
            labels: None,
        };
        for mut req in server.incoming_requests() {
            let json = Header::from_bytes("Content-Type", "application/json").unwrap();
            let (status, body) = match (req.method(), req.url()) {
                (Method::Get, "/v1/info") => (200, serde_json::to_string(&info).unwrap()),
                (Method::Post, "/v1/classify") => {
                    let mut text = String::new();
                    req.as_reader().read_to_string(&mut text).unwrap();
                    classify(&model, &info, &text)
                }
                _ => (404, "{\"error\":\"not found\"}".into()),
            };
            let _ = req.respond(
                Response::from_string(body)
                    .with_status_code(status)
                    .with_header(json),
            );
        }
    });
    url
}

fn classify(model: &ReferenceModel, info: &ModelInfo, text: &str) -> (u16, String) {
    let Ok(body) = serde_json::from_str::<ClassifyRequest>(text) else {
        return (400, "{\"error\":\"bad json\"}".into());
    };
    let len: usize = info.input_shape.iter().product();
    if body.shape != info.input_shape || body.images.iter().any(|i| i.len() != len) {
        return (400, "{\"error\":\"shape mismatch\"}".into());
    }
    if body.images.len() > SERVER_MAX_BATCH {
        return (413, "{\"error\":\"batch too large\"}".into());
    }
    if body
        .images
        .iter()
        .flatten()
        .any(|v| !(0.0..=1.0).contains(v))
    {
        return (422, "{\"error\":\"value out of range\"}".into());
    }
    let [c, h, w] = body.shape;
    let probs = body
        .images
        .into_iter()
        .map(|v| model.probabilities(&ImageTensor::new(c, h, w, v).unwrap()))
        .collect();
    let resp = ClassifyResponse {
        probs,
        model_id: info.model_id.clone(),
    };
    (200, serde_json::to_string(&resp).unwrap())
}

fn connect(url: &str, max_batch: usize) -> RemoteClassifier {
    RemoteClassifier::connect(
        url,
        RemoteOptions {
            max_batch,
            ..RemoteOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn episodes_match_in_process_backend() {
    let fx = desk_fixture(0).unwrap();
    let url = serve(fx.model.clone());
    let local = ClassifierHandle::in_process(fx.model);
    let remote = ClassifierHandle::remote(connect(&url, SERVER_MAX_BATCH));
    let bank =
        FilterBank::from_builtin(vec![FilterSpec::gaussian_noise(), FilterSpec::brightness()])
            .unwrap();
    let config = EngineConfig {
        budget: 60,
        ..EngineConfig::default()
    };
    let mut episodes = 0;
    for (i, item) in fx.images.iter().take(6).enumerate() {
        let goal = AttackGoal::Untargeted {
            true_class: item.label,
        };
        let run = |clf: &ClassifierHandle| {
            let ctx = AttackContext {
                classifier: clf,
                bank: &bank,
                config: &config,
                cache: None,
            };
            let codec = ctx.codec(4).unwrap();
            run_episode(
                &ctx,
                &item.image,
                goal,
                &mut RandomPolicy::new(i as u64),
                &codec,
                40 + i as u64,
            )
            .unwrap()
        };
        let a = run(&local);
        let b = run(&remote);
        assert_eq!(
            (a.status, a.steps, a.success),
            (b.status, b.steps, b.success)
        );
        assert_eq!(
            (a.raw_queries, a.cleanup_queries),
            (b.raw_queries, b.cleanup_queries)
        );
        assert!((a.final_l2 - b.final_l2).abs() < 1e-6);
        assert!((a.pre_cleanup_l2 - b.pre_cleanup_l2).abs() < 1e-6);
        episodes += 1;
    }
    assert_eq!(episodes, 6);
    assert_eq!(local.queries(), remote.queries());
}

#[test]
fn remote_probabilities_match_in_process() {
    let fx = desk_fixture(1).unwrap();
    let url = serve(fx.model.clone());
    let remote = ClassifierHandle::remote(connect(&url, SERVER_MAX_BATCH));
    assert_eq!(remote.num_classes(), 2);
    assert_eq!(remote.input_shape(), (1, 16, 16));
    let images: Vec<ImageTensor> = fx.images.iter().take(40).map(|i| i.image.clone()).collect();
    // 40 images span three server calls; order must survive the split
    let got = remote.classify_batch(&images).unwrap();
    for (img, p) in images.iter().zip(&got) {
        let want = fx.model.probabilities(img);
        for (x, y) in want.iter().zip(p) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert_eq!(remote.queries(), 40);
}

#[test]
fn batch_ordering_for_sizes_one_two_and_max() {
    let fx = desk_fixture(2).unwrap();
    let url = serve(fx.model.clone());
    let remote = ClassifierHandle::remote(connect(&url, SERVER_MAX_BATCH));
    let images: Vec<ImageTensor> = fx.images.iter().map(|i| i.image.clone()).collect();
    for n in [1, 2, SERVER_MAX_BATCH] {
        let batch: Vec<ImageTensor> = images.iter().rev().take(n).cloned().collect();
        let got = remote.classify_batch(&batch).unwrap();
        assert_eq!(got.len(), n);
        for (img, p) in batch.iter().zip(&got) {
            assert_eq!(
                top_label(p).unwrap(),
                top_label(&fx.model.probabilities(img)).unwrap()
            );
            assert!((p[0] - fx.model.probabilities(img)[0]).abs() < 1e-6);
        }
    }
}

#[test]
fn server_rejections_surface_with_status() {
    let fx = desk_fixture(3).unwrap();
    let url = serve(fx.model.clone());

    // the client trusts its configured batch limit; a larger one trips 413
    let greedy = ClassifierHandle::remote(connect(&url, 64));
    let many: Vec<ImageTensor> = (0..SERVER_MAX_BATCH + 1)
        .map(|_| fx.images[0].image.clone())
        .collect();
    assert!(matches!(
        greedy.classify_batch(&many),
        Err(TargetError::Rejected { status: 413, .. })
    ));

    let http = ureq::agent();
    let post = |body: &str| match http
        .post(&format!("{url}/v1/classify"))
        .set("Content-Type", "application/json")
        .send_string(body)
    {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(code, _)) => code,
        Err(e) => panic!("{e}"),
    };
    let ok = serde_json::to_string(&ClassifyRequest::from_images(&[fx.images[0].image.clone()]))
        .unwrap();
    assert_eq!(post(&ok), 200);
    let mut bad = ClassifyRequest::from_images(&[fx.images[0].image.clone()]);
    bad.images[0][5] = 1.5;
    assert_eq!(post(&serde_json::to_string(&bad).unwrap()), 422);
    bad.shape = [3, 16, 16];
    assert_eq!(post(&serde_json::to_string(&bad).unwrap()), 400);

    // the client refuses to send a wrongly shaped image at all
    let remote = ClassifierHandle::remote(connect(&url, SERVER_MAX_BATCH));
    assert!(matches!(
        remote.classify(&ImageTensor::zeros(1, 8, 8)),
        Err(TargetError::ShapeMismatch { .. })
    ));
}
