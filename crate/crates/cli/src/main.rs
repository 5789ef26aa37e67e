fn main() -> std::process::ExitCode {
    rigfit_cli::run()
}
