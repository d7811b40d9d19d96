fn main() -> std::process::ExitCode {
    causal_masking::cli::main()
}
