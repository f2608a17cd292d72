fn main() {
    std::process::exit(vdtrain_cli::run(std::env::args_os()));
}
