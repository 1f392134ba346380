fn main() -> std::process::ExitCode {
    svae::harness::cli::main()
}
