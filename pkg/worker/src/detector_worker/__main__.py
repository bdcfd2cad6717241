import argparse
import sys

from detector_worker.model import WorkerDetector, load_checkpoint


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="detector-worker")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="speak the stdio protocol until EOF")
    p_serve.add_argument("--checkpoint", required=True)

    p_train = sub.add_parser("train", help="fit the model on an exported corpus")
    p_train.add_argument("--train-data", required=True)
    p_train.add_argument("--val-data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--epochs", type=int, default=12)

    p_test = sub.add_parser("self-test", help="verify a checkpoint on a sample image")
    p_test.add_argument("--checkpoint", required=True)
    p_test.add_argument("--image", required=True)

    args = parser.parse_args(argv)

    if args.command == "serve":
        from detector_worker.protocol import serve

        model, meta = load_checkpoint(args.checkpoint)
        return serve(WorkerDetector(model, meta))

    if args.command == "train":
        from detector_worker.train import train_worker_model

        meta = train_worker_model(
            args.train_data, args.val_data, args.out, seed=args.seed, epochs=args.epochs
        )
        print(
            f"trained {meta['epochs_run']} epochs, val recall {meta['val_recall']:.3f}, "
            f"checkpoint {args.out}"
        )
        return 0

    from detector_worker.selftest import self_test

    return self_test(args.checkpoint, args.image)


if __name__ == "__main__":
    sys.exit(main())
