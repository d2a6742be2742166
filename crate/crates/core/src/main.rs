fn main() {
    let seed = std::env::var(podcount::cli::SEED_ENV).ok();
    std::process::exit(podcount::cli::run(std::env::args_os(), seed.as_deref()));
}
