fn main() -> std::process::ExitCode {
    fairgp::cli::main()
}
