//! Real MNIST files, when present. Point `GATENAS_MNIST_DIR` at a directory
//! holding the four standard IDX files and run with `--ignored`.

use std::path::PathBuf;

use gatenas::config::{Config, DataSource};
use gatenas::{dataset, idx, pipeline};
use gatenas_core::train::{accuracy, StageTag, Trainer};

fn mnist_dir() -> PathBuf {
    PathBuf::from(std::env::var("GATENAS_MNIST_DIR").expect("set GATENAS_MNIST_DIR"))
}

fn file(name: &str) -> PathBuf {
    mnist_dir().join(name)
}

#[test]
#[ignore = "needs the MNIST IDX files"]
fn test_split_header() {
    let d = idx::load_idx(&file("t10k-images-idx3-ubyte"), &file("t10k-labels-idx1-ubyte"), 10, None).unwrap();
    assert_eq!((d.len(), d.image_shape()), (10_000, [1, 28, 28]));
}

#[test]
#[ignore = "needs the MNIST IDX files"]
fn pretraining_learns_a_5k_subset() {
    let mut c = Config::default();
    c.data.source = DataSource::MnistIdx {
        train_images: file("train-images-idx3-ubyte"),
        train_labels: file("train-labels-idx1-ubyte"),
        test_images: file("t10k-images-idx3-ubyte"),
        test_labels: file("t10k-labels-idx1-ubyte"),
    };
    c.data.train_samples = 5000;
    c.data.test_samples = 1000;
    c.pretrain.epochs = 5;
    let (train, _) = dataset::load(&c.data).unwrap();
    assert_eq!(train.len(), 5000);
    let p = pipeline::prepare(&c).unwrap();
    let mut t = Trainer::new(p.net, p.settings, None, c.seed).unwrap();
    while t.progress().stage == StageTag::Pretrain {
        t.step_epoch(&p.train, &p.test).unwrap();
    }
    t.recalibrate(&p.train, c.train.recalibration_batches).unwrap();
    let net = t.net();
    let acc = accuracy(&p.train, |x| net.predict(x)).unwrap();
    assert!(acc > 0.9, "train accuracy {acc}");
}
